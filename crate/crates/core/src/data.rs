//! Corpus loading, word-level tokenization, vocabulary construction,
//! batching with dynamic padding, k-fold splitting, and synthetic tasks.
//!
//! Tokenizer rule set (applied identically to source and target text):
//!
//! 1. lowercase the whole line;
//! 2. alphanumeric runs form one token;
//! 3. any other non-whitespace character becomes a single-character token;
//! 4. whitespace separates tokens and is discarded.
//!
//! So `"Two dogs play."` → `[two, dogs, play, .]` and `"Hello, world"` →
//! `[hello, ,, world]`.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved vocabulary indices.
pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;

const SPECIALS: [&str; 4] = ["<sos>", "<eos>", "<unk>", "<pad>"];

/// Lowercase word-level tokenization with punctuation split off.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in line.to_lowercase().chars() {
        if c.is_alphanumeric() {
            word.push(c);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Join tokens back into text with single spaces.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Token ↔ index maps with the four specials at reserved slots 0..3.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    token_to_index: HashMap<String, usize>,
    index_to_token: Vec<String>,
    counts: Vec<u64>,
}

impl Vocab {
    /// Build from training sequences, keeping tokens with frequency at
    /// least `min_freq`. Non-special indices are ordered by descending
    /// frequency, ties broken lexicographically.
    pub fn build<'a, I>(sequences: I, min_freq: u64) -> Result<Vocab>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        let mut saw_any = false;
        for seq in sequences {
            saw_any = true;
            for tok in seq {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut index_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0u64; SPECIALS.len()];
        for (tok, c) in kept {
            index_to_token.push(tok.to_string());
            counts.push(c);
        }
        let token_to_index = index_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_index,
            index_to_token,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    /// Never true: the specials are always present.
    pub fn is_empty(&self) -> bool {
        self.index_to_token.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.index_to_token[index]
    }

    /// Encode one token, mapping unseen tokens to `<unk>`.
    pub fn encode_token(&self, token: &str) -> usize {
        self.index_of(token).unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    /// Encode and bracket with `<sos>` … `<eos>`.
    pub fn encode_sequence(&self, tokens: &[String]) -> Vec<usize> {
        let mut out = Vec::with_capacity(tokens.len() + 2);
        out.push(SOS);
        out.extend(self.encode(tokens));
        out.push(EOS);
        out
    }

    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .map(|&i| self.index_to_token[i].clone())
            .collect()
    }

    /// `token<TAB>count` dump, one line per entry, index order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (tok, count) in self.index_to_token.iter().zip(&self.counts) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&count.to_string());
            out.push('\n');
        }
        out
    }
}

/// A tokenized sentence-pair corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Load a UTF-8 TSV file: one pair per line, `source<TAB>target`.
    pub fn from_tsv(path: &Path) -> Result<ParallelCorpus> {
        let mut raw = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_tsv_bytes(&raw)
    }

    fn from_tsv_bytes(raw: &[u8]) -> Result<ParallelCorpus> {
        let mut pairs = Vec::new();
        for (i, line) in raw.split(|&b| b == b'\n').enumerate() {
            let line = match line.strip_suffix(b"\r") {
                Some(l) => l,
                None => line,
            };
            if line.is_empty() {
                continue;
            }
            let text = std::str::from_utf8(line).map_err(|_| {
                Error::data(format!("line {}: invalid UTF-8", i + 1))
            })?;
            let mut fields = text.splitn(2, '\t');
            let src = fields.next().unwrap_or("");
            let tgt = fields.next().ok_or_else(|| {
                Error::data(format!("line {}: expected source<TAB>target", i + 1))
            })?;
            pairs.push((tokenize(src), tokenize(tgt)));
        }
        if pairs.is_empty() {
            return Err(Error::data("corpus contains no sentence pairs"));
        }
        Ok(ParallelCorpus { pairs })
    }

    /// Drop pairs whose source or target exceeds `max_tokens` tokens
    /// (before `<sos>`/`<eos>` bracketing). Returns the number removed.
    pub fn filter_max_tokens(&mut self, max_tokens: usize) -> usize {
        let before = self.pairs.len();
        self.pairs
            .retain(|(s, t)| s.len() <= max_tokens && t.len() <= max_tokens);
        before - self.pairs.len()
    }

    pub fn source_sequences(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|(s, _)| s.as_slice())
    }

    pub fn target_sequences(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|(_, t)| t.as_slice())
    }
}

/// Synthetic task family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthTask {
    Copy,
    Reverse,
}

/// Generate a synthetic parallel corpus over the token set `w0..w{vocab_size−1}`:
/// random source sequences with the target equal to the source (`Copy`) or
/// its reversal (`Reverse`). Deterministic in `seed`.
pub fn synth_task(
    task: SynthTask,
    vocab_size: usize,
    len_range: (usize, usize),
    n: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_size < 2 {
        return Err(Error::config("synthetic vocab_size must be at least 2"));
    }
    let (lo, hi) = len_range;
    if lo == 0 || hi < lo {
        return Err(Error::config(format!(
            "invalid length range {lo}..={hi}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(lo..=hi);
        let src: Vec<String> = (0..len)
            .map(|_| format!("w{}", rng.random_range(0..vocab_size)))
            .collect();
        let tgt = match task {
            SynthTask::Copy => src.clone(),
            SynthTask::Reverse => src.iter().rev().cloned().collect(),
        };
        pairs.push((src, tgt));
    }
    Ok(ParallelCorpus { pairs })
}

/// Deterministic partition of example indices for cross-validation.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub seed: u64,
    pub n_folds: usize,
    folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn fold(&self, k: usize) -> &[usize] {
        &self.folds[k]
    }

    /// All indices outside fold `k`, in plan order.
    pub fn train_indices(&self, k: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect()
    }

    /// `fold,example_index` CSV for audit.
    pub fn dump_csv(&self) -> String {
        let mut out = String::from("fold,example_index\n");
        for (k, fold) in self.folds.iter().enumerate() {
            for &i in fold {
                out.push_str(&format!("{k},{i}\n"));
            }
        }
        out
    }
}

/// Shuffle `0..n_examples` with a fixed seed and split into `n_folds`
/// contiguous chunks whose sizes differ by at most one.
pub fn make_folds(n_examples: usize, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::config(format!(
            "cross-validation needs at least 2 folds, got {n_folds}"
        )));
    }
    if n_examples < n_folds {
        return Err(Error::config(format!(
            "{n_examples} examples cannot fill {n_folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = n_examples / n_folds;
    let extra = n_examples % n_folds;
    let mut folds = Vec::with_capacity(n_folds);
    let mut cursor = 0;
    for k in 0..n_folds {
        let size = base + usize::from(k < extra);
        folds.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(FoldPlan {
        seed,
        n_folds,
        folds,
    })
}

/// Index-encoded token matrix, row-major with `<pad>` fill.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<usize>,
}

impl TokenMatrix {
    pub fn row(&self, r: usize) -> &[usize] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// One padded batch with boolean pad masks (`true` exactly at `<pad>`).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: TokenMatrix,
    pub tgt: TokenMatrix,
    pub src_pad_mask: Vec<bool>,
    pub tgt_pad_mask: Vec<bool>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.src.rows
    }
}

/// Encode selected corpus pairs with `<sos>`/`<eos>` bracketing.
pub fn encode_pairs(
    corpus: &ParallelCorpus,
    indices: &[usize],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    indices
        .iter()
        .map(|&i| {
            let (s, t) = &corpus.pairs[i];
            (src_vocab.encode_sequence(s), tgt_vocab.encode_sequence(t))
        })
        .collect()
}

fn pad_matrix(rows: &[&Vec<usize>]) -> (TokenMatrix, Vec<bool>) {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut data = Vec::with_capacity(rows.len() * cols);
    let mut mask = Vec::with_capacity(rows.len() * cols);
    for row in rows {
        data.extend_from_slice(row);
        mask.extend(std::iter::repeat(false).take(row.len()));
        data.extend(std::iter::repeat(PAD).take(cols - row.len()));
        mask.extend(std::iter::repeat(true).take(cols - row.len()));
    }
    (
        TokenMatrix {
            rows: rows.len(),
            cols,
            data,
        },
        mask,
    )
}

/// Shuffle encoded examples with `seed`, group into batches of
/// `batch_size`, and pad each batch independently to its own maximum
/// length. Sequences longer than `max_len` are a length error.
pub fn make_batches(
    examples: &[(Vec<usize>, Vec<usize>)],
    batch_size: usize,
    seed: u64,
    max_len: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    for (i, (s, t)) in examples.iter().enumerate() {
        if s.len() > max_len || t.len() > max_len {
            return Err(Error::length(format!(
                "example {i} exceeds the maximum sequence length {max_len}"
            )));
        }
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let srcs: Vec<&Vec<usize>> = chunk.iter().map(|&i| &examples[i].0).collect();
        let tgts: Vec<&Vec<usize>> = chunk.iter().map(|&i| &examples[i].1).collect();
        let (src, src_pad_mask) = pad_matrix(&srcs);
        let (tgt, tgt_pad_mask) = pad_matrix(&tgts);
        batches.push(Batch {
            src,
            tgt,
            src_pad_mask,
            tgt_pad_mask,
        });
    }
    Ok(batches)
}

//! SNLI-format corpus ingestion and mini-batch assembly.
//!
//! Input records are newline-delimited JSON objects with string fields
//! `gold_label`, `sentence1` (premise) and `sentence2` (hypothesis); all
//! other fields are ignored. Records whose gold label is `-` (annotator
//! non-consensus) are skipped and counted.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::Label;
use crate::embeddings::{tokenize, PAD_TOKEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SentencePair {
    pub premise_tokens: Vec<String>,
    pub hypothesis_tokens: Vec<String>,
    pub gold: Option<Label>,
    pub premise_raw: String,
    pub hypothesis_raw: String,
}

impl SentencePair {
    /// Tokenize raw texts; fails when either side tokenizes to nothing.
    pub fn from_texts(premise: &str, hypothesis: &str, gold: Option<Label>) -> Result<Self> {
        let premise_tokens = tokenize(premise);
        let hypothesis_tokens = tokenize(hypothesis);
        if premise_tokens.is_empty() || hypothesis_tokens.is_empty() {
            return Err(Error::Argument(format!(
                "sentence tokenizes to nothing: premise='{premise}', hypothesis='{hypothesis}'"
            )));
        }
        Ok(SentencePair {
            premise_tokens,
            hypothesis_tokens,
            gold,
            premise_raw: premise.to_string(),
            hypothesis_raw: hypothesis.to_string(),
        })
    }
}

/// Ingestion accounting: input records = loaded + skipped + empty.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub records: usize,
    pub loaded: usize,
    /// gold_label "-" records.
    pub skipped_no_consensus: usize,
    /// Records whose premise or hypothesis tokenized to nothing.
    pub skipped_empty: usize,
}

/// Parse an SNLI JSON-lines file. Labels map entailment -> 0, neutral -> 1,
/// contradiction -> 2. A record missing a required field is a hard parse
/// error naming the line.
pub fn load_snli(path: &Path) -> Result<(Vec<SentencePair>, IngestStats)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    let mut stats = IngestStats::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.records += 1;
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: format!("invalid JSON: {e}"),
        })?;
        let field = |name: &str| -> Result<&str> {
            value
                .get(name)
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("missing required string field '{name}'"),
                })
        };
        let gold_label = field("gold_label")?;
        let sentence1 = field("sentence1")?;
        let sentence2 = field("sentence2")?;
        if gold_label == "-" {
            stats.skipped_no_consensus += 1;
            continue;
        }
        let gold = Label::from_name(gold_label).ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("unknown gold_label '{gold_label}'"),
        })?;
        match SentencePair::from_texts(sentence1, sentence2, Some(gold)) {
            Ok(pair) => {
                pairs.push(pair);
                stats.loaded += 1;
            }
            Err(_) => {
                log::warn!("line {line_no}: empty sentence after tokenization, skipped");
                stats.skipped_empty += 1;
            }
        }
    }
    Ok((pairs, stats))
}

/// One side of a batched pair, padded to the configured sequence length.
/// The mask is true exactly at real-token positions (always a prefix).
#[derive(Debug, Clone)]
pub struct PaddedSentence {
    pub tokens: Vec<String>,
    pub mask: Vec<bool>,
}

impl PaddedSentence {
    pub fn build(tokens: &[String], seq_len: usize) -> (Self, bool) {
        let truncated = tokens.len() > seq_len;
        let kept = tokens.len().min(seq_len);
        let mut padded = Vec::with_capacity(seq_len);
        let mut mask = Vec::with_capacity(seq_len);
        padded.extend(tokens[..kept].iter().cloned());
        mask.extend(std::iter::repeat(true).take(kept));
        while padded.len() < seq_len {
            padded.push(PAD_TOKEN.to_string());
            mask.push(false);
        }
        (PaddedSentence { tokens: padded, mask }, truncated)
    }

    /// The real tokens (mask-selected prefix).
    pub fn real_tokens(&self) -> &[String] {
        let n = self.mask.iter().filter(|m| **m).count();
        &self.tokens[..n]
    }
}

#[derive(Debug, Clone)]
pub struct BatchPair {
    pub premise: PaddedSentence,
    pub hypothesis: PaddedSentence,
    pub gold: Option<Label>,
    /// Index into the source pair list (pre-shuffle identity).
    pub source_index: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<BatchPair>,
}

/// Deterministic shuffle + chunking + padding. Returns the batches and
/// the number of sentences that lost tokens to truncation.
pub fn make_batches(
    pairs: &[SentencePair],
    batch_size: usize,
    seq_len: usize,
    shuffle_seed: u64,
) -> (Vec<Batch>, usize) {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);

    let mut truncated = 0usize;
    let mut batches = Vec::with_capacity(pairs.len().div_ceil(batch_size.max(1)));
    for chunk in order.chunks(batch_size.max(1)) {
        let batch_pairs = chunk
            .iter()
            .map(|&idx| {
                let pair = &pairs[idx];
                let (premise, p_trunc) = PaddedSentence::build(&pair.premise_tokens, seq_len);
                let (hypothesis, h_trunc) = PaddedSentence::build(&pair.hypothesis_tokens, seq_len);
                truncated += usize::from(p_trunc) + usize::from(h_trunc);
                BatchPair {
                    premise,
                    hypothesis,
                    gold: pair.gold,
                    source_index: idx,
                }
            })
            .collect();
        batches.push(Batch { pairs: batch_pairs });
    }
    (batches, truncated)
}

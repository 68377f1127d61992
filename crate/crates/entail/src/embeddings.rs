//! Frozen pretrained word vectors with OOV handling and the learnable
//! sigmoid transform applied to every vector before encoding.
//!
//! The embedding matrix itself is never trained: it is parsed once from a
//! text file and only read afterwards. Tokens missing from the file get a
//! random vector, each element drawn from N(0, std^2); the draw is derived
//! from the token itself plus a fixed seed, so the assignment is stable
//! across lookup order, threads, runs and checkpoint round-trips.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hashing::Fnv1a64;
use crate::tape::{NodeId, ParamId, Tape};
use crate::tensor::Tensor;

pub const PAD_TOKEN: &str = "<pad>";
pub const PAD_INDEX: usize = 0;

/// Token-to-index map with the reserved PAD entry at index 0.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    token_to_index: HashMap<String, usize>,
    index_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            token_to_index: HashMap::new(),
            index_to_token: Vec::new(),
        };
        v.index_to_token.push(PAD_TOKEN.to_string());
        v.token_to_index.insert(PAD_TOKEN.to_string(), PAD_INDEX);
        v
    }

    /// Insert a token (assumed lowercased) and return its index; existing
    /// tokens keep their first index.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.token_to_index.get(token) {
            return i;
        }
        let i = self.index_to_token.len();
        self.index_to_token.push(token.to_string());
        self.token_to_index.insert(token.to_string(), i);
        i
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn token_at(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(|s| s.as_str())
    }

    /// Number of entries including PAD.
    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_token.len() <= 1
    }

    /// Tokens in index order, PAD excluded.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.index_to_token.iter().skip(1).map(|s| s.as_str())
    }
}

/// Lowercase, split on whitespace, then peel leading/trailing ASCII
/// punctuation into separate tokens. Lowercasing here is authoritative:
/// every lookup path goes through this function or applies it internally.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut out = Vec::new();
    for raw in lowered.split_whitespace() {
        let chars: Vec<char> = raw.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        let mut leading = Vec::new();
        let mut trailing = Vec::new();
        while start < end && chars[start].is_ascii_punctuation() {
            leading.push(chars[start].to_string());
            start += 1;
        }
        while end > start && chars[end - 1].is_ascii_punctuation() {
            trailing.push(chars[end - 1].to_string());
            end -= 1;
        }
        out.extend(leading);
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        trailing.reverse();
        out.extend(trailing);
    }
    out
}

/// Ingestion counters from [`EmbeddingTable::load`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows: usize,
    /// Lines skipped because the token contains spaces (unsupported).
    pub multiword_skipped: usize,
    /// Lines with the right field count but unparseable numbers.
    pub malformed: usize,
    /// Duplicate tokens (first occurrence wins).
    pub duplicates: usize,
}

/// Frozen |V| x dim embedding matrix plus the trainable transform
/// parameters and the OOV cache.
#[derive(Debug)]
pub struct EmbeddingTable {
    vocab: Vocabulary,
    /// Row-major |V| x dim. Row 0 is the all-zero PAD row.
    matrix: Vec<f64>,
    dim: usize,
    oov_seed: u64,
    oov_std: f64,
    oov_cache: RwLock<HashMap<String, Vec<f64>>>,
    pub load_report: LoadReport,
}

impl EmbeddingTable {
    /// Parse a whitespace-separated text embedding file: one entry per
    /// line, token then `dim` decimal reals.
    pub fn load(path: &Path, dim: usize, oov_seed: u64, oov_std: f64) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let reader = BufReader::new(file);
        let mut table = Self::empty(dim, oov_seed, oov_std);
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            table.ingest_line(&line, line_no)?;
        }
        if table.vocab.is_empty() {
            log::warn!(
                "embedding file {} contained no usable rows; every token will take the OOV path",
                path.display()
            );
        }
        Ok(table)
    }

    pub fn empty(dim: usize, oov_seed: u64, oov_std: f64) -> Self {
        EmbeddingTable {
            vocab: Vocabulary::new(),
            matrix: vec![0.0; dim], // PAD row
            dim,
            oov_seed,
            oov_std,
            oov_cache: RwLock::new(HashMap::new()),
            load_report: LoadReport::default(),
        }
    }

    /// Rebuild a table from checkpointed pieces. The matrix is row-major
    /// |V| x dim including the PAD row at index 0.
    pub fn from_parts(
        vocab: Vocabulary,
        matrix: Vec<f64>,
        dim: usize,
        oov_seed: u64,
        oov_std: f64,
    ) -> Result<Self> {
        if matrix.len() != vocab.len() * dim {
            return Err(Error::Argument(format!(
                "embedding matrix has {} values, expected {} x {}",
                matrix.len(),
                vocab.len(),
                dim
            )));
        }
        Ok(EmbeddingTable {
            vocab,
            matrix,
            dim,
            oov_seed,
            oov_std,
            oov_cache: RwLock::new(HashMap::new()),
            load_report: LoadReport::default(),
        })
    }

    fn ingest_line(&mut self, line: &str, line_no: usize) -> Result<()> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < self.dim + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "expected a token and {} values, found {} fields",
                    self.dim,
                    fields.len()
                ),
            });
        }
        if fields.len() > self.dim + 1 {
            // Multi-word tokens are unsupported; recognizable when the
            // trailing `dim` fields are all numeric.
            let tail_numeric = fields[fields.len() - self.dim..]
                .iter()
                .all(|f| f.parse::<f64>().is_ok());
            if tail_numeric {
                log::warn!("line {line_no}: token contains spaces, skipped");
                self.load_report.multiword_skipped += 1;
                return Ok(());
            }
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "expected a token and {} values, found {} fields",
                    self.dim,
                    fields.len()
                ),
            });
        }

        let token = fields[0].to_lowercase();
        let mut row = Vec::with_capacity(self.dim);
        for f in &fields[1..] {
            match f.parse::<f64>() {
                Ok(v) => row.push(v),
                Err(_) => {
                    log::warn!("line {line_no}: unparseable value '{f}', line skipped");
                    self.load_report.malformed += 1;
                    return Ok(());
                }
            }
        }
        if self.vocab.index_of(&token).is_some() {
            self.load_report.duplicates += 1;
            return Ok(());
        }
        self.vocab.insert(&token);
        self.matrix.extend_from_slice(&row);
        self.load_report.rows += 1;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn oov_seed(&self) -> u64 {
        self.oov_seed
    }

    pub fn oov_std(&self) -> f64 {
        self.oov_std
    }

    pub fn frozen_row(&self, index: usize) -> &[f64] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    pub fn frozen_matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Word vector for a token. In-vocabulary tokens return their frozen
    /// file row; anything else takes the OOV path. Never fails.
    pub fn lookup(&self, token: &str) -> Tensor {
        Tensor::vector(self.word_vector(token))
    }

    /// Internal lookup used by the model's forward pass.
    pub(crate) fn word_vector(&self, token: &str) -> Vec<f64> {
        let token = token.to_lowercase();
        if let Some(i) = self.vocab.index_of(&token) {
            return self.frozen_row(i).to_vec();
        }
        // Fast path: already cached.
        if let Some(v) = self.oov_cache.read().unwrap().get(&token) {
            return v.clone();
        }
        let v = self.sample_oov(&token);
        // Insert-if-absent: a racing thread computed the identical vector,
        // so whichever insert wins the row stays canonical.
        let mut cache = self.oov_cache.write().unwrap();
        cache.entry(token).or_insert_with(|| v.clone());
        v
    }

    /// Elementwise N(0, std^2) draw from a stream seeded by (oov_seed, token).
    fn sample_oov(&self, token: &str) -> Vec<f64> {
        let mut h = Fnv1a64::new();
        h.update(&self.oov_seed.to_le_bytes());
        h.update(token.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let normal = Normal::new(0.0, self.oov_std).expect("std is positive");
        (0..self.dim).map(|_| normal.sample(&mut rng)).collect()
    }

    /// Snapshot of the OOV cache, sorted by token for deterministic output.
    pub fn oov_entries(&self) -> Vec<(String, Vec<f64>)> {
        let cache = self.oov_cache.read().unwrap();
        let mut entries: Vec<(String, Vec<f64>)> =
            cache.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries
    }

    pub fn restore_oov_entries(&self, entries: Vec<(String, Vec<f64>)>) {
        let mut cache = self.oov_cache.write().unwrap();
        for (k, v) in entries {
            cache.insert(k, v);
        }
    }
}

/// Trainable parameters of the sigmoid word-vector transform
/// sigma(Wᵀw + b).
#[derive(Debug, Clone, Copy)]
pub struct TransformParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl TransformParams {
    /// Apply the transform to a word-vector node. Output is componentwise
    /// in (0,1); gradients reach only `w` and `b`, never the frozen matrix
    /// (word vectors enter the tape as constants).
    pub fn apply(&self, tape: &mut Tape, word: NodeId) -> Result<NodeId> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let lin = tape.vecmat(word, w)?;
        let shifted = tape.add(lin, b)?;
        Ok(tape.sigmoid(shifted))
    }
}

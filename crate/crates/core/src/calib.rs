//! Calibration token streams.
//!
//! Every sequence is drawn from its own seeded stream, so any batch can be
//! regenerated without replaying the ones before it.

use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::seed::{self, Domain};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    tokens: Vec<u32>,
    batch: usize,
    seq_len: usize,
    /// Seed and index of the first sequence this batch was cut from.
    pub lineage: (u64, usize),
}

impl TokenBatch {
    pub fn new(tokens: Vec<u32>, batch: usize, seq_len: usize, lineage: (u64, usize)) -> Result<Self> {
        if tokens.len() != batch * seq_len {
            return Err(Error::Dimension(format!(
                "{} tokens cannot form a {batch}x{seq_len} batch",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            batch,
            seq_len,
            lineage,
        })
    }

    pub fn from_sequences(seqs: &[Vec<u32>], lineage: (u64, usize)) -> Result<Self> {
        let seq_len = seqs.first().map_or(0, Vec::len);
        if seqs.iter().any(|s| s.len() != seq_len) {
            return Err(Error::Dimension("sequences differ in length".into()));
        }
        Self::new(seqs.concat(), seqs.len(), seq_len, lineage)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn select(&self, indices: &[usize]) -> TokenBatch {
        let tokens = indices.iter().flat_map(|&i| self.sequence(i).iter().copied()).collect();
        TokenBatch {
            tokens,
            batch: indices.len(),
            seq_len: self.seq_len,
            lineage: self.lineage,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CalibrationSource {
    UniformRandom,
    Markov,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub num_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub source: CalibrationSource,
    pub holdout_fraction: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            num_sequences: 128,
            seq_len: 64,
            seed: 0,
            source: CalibrationSource::Markov,
            holdout_fraction: 0.25,
        }
    }
}

impl CalibrationConfig {
    pub fn holdout_count(&self) -> usize {
        (self.holdout_fraction * self.num_sequences as f64).round() as usize
    }
}

/// Seeded order-1 transition table with peaked rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovTable {
    rows: Vec<Vec<f64>>,
}

impl MarkovTable {
    pub fn generate(vocab: usize, seed: u64) -> Result<Self> {
        let gamma = Gamma::new(0.3, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;
        let rows = (0..vocab)
            .map(|r| {
                let mut rng = seed::stream(seed, Domain::MarkovTable, r as u64);
                let mut w: Vec<f64> = (0..vocab).map(|_| gamma.sample(&mut rng) + 1e-12).collect();
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= total);
                w
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn probability(&self, from: usize, to: usize) -> f64 {
        self.rows[from][to]
    }

    pub fn vocab(&self) -> usize {
        self.rows.len()
    }

    fn next(&self, from: usize, rng: &mut impl Rng) -> u32 {
        let u: f64 = rng.random();
        let row = &self.rows[from];
        let mut acc = 0.0;
        for (t, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return t as u32;
            }
        }
        (row.len() - 1) as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub train: Vec<Vec<u32>>,
    pub holdout: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub vocab: usize,
    pub seed: u64,
    pub table: Option<MarkovTable>,
}

impl CalibrationSet {
    pub fn num_batches(&self, batch_size: usize) -> usize {
        self.train.len() / batch_size.max(1)
    }

    /// Training batch `index` (wrapping over epochs); the trailing partial batch is dropped.
    pub fn batch(&self, index: usize, batch_size: usize) -> Result<TokenBatch> {
        let n = self.num_batches(batch_size);
        if n == 0 {
            return Err(Error::Parameter(format!(
                "batch size {batch_size} exceeds {} training sequences",
                self.train.len()
            )));
        }
        let start = (index % n) * batch_size;
        TokenBatch::from_sequences(&self.train[start..start + batch_size], (self.seed, start))
    }

    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = TokenBatch> + '_ {
        (0..self.num_batches(batch_size)).filter_map(move |i| self.batch(i, batch_size).ok())
    }

    pub fn train_batch(&self) -> Result<TokenBatch> {
        TokenBatch::from_sequences(&self.train, (self.seed, 0))
    }

    pub fn holdout_batch(&self) -> Result<TokenBatch> {
        TokenBatch::from_sequences(&self.holdout, (self.seed, self.train.len()))
    }
}

fn read_sequences(path: &PathBuf, vocab: usize, seq_len: usize) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ids: Vec<u32> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::Input(format!("line {}: `{t}` is not a token id", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Input(format!(
                "line {}: token {bad} outside vocabulary of {vocab}",
                lineno + 1
            )));
        }
        if ids.len() < seq_len {
            return Err(Error::Input(format!(
                "line {}: {} tokens, need {seq_len}",
                lineno + 1,
                ids.len()
            )));
        }
        out.push(ids[..seq_len].to_vec());
    }
    Ok(out)
}

pub fn generate_calibration(vocab: usize, config: &CalibrationConfig) -> Result<CalibrationSet> {
    if vocab == 0 || config.seq_len == 0 || config.num_sequences == 0 {
        return Err(Error::Parameter("vocab, seq_len and num_sequences must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(Error::Parameter(format!(
            "holdout fraction {} outside [0, 1)",
            config.holdout_fraction
        )));
    }
    let n_hold = config.holdout_count();
    let total = config.num_sequences + n_hold;
    let (mut seqs, table) = match &config.source {
        CalibrationSource::UniformRandom => {
            let seqs = (0..total)
                .map(|i| {
                    let mut rng = seed::stream(config.seed, Domain::Sequence, i as u64);
                    (0..config.seq_len).map(|_| rng.random_range(0..vocab as u32)).collect()
                })
                .collect();
            (seqs, None)
        }
        CalibrationSource::Markov => {
            let table = MarkovTable::generate(vocab, config.seed)?;
            let seqs = (0..total)
                .map(|i| {
                    let mut rng = seed::stream(config.seed, Domain::Sequence, i as u64);
                    let mut cur = rng.random_range(0..vocab as u32);
                    let mut s = Vec::with_capacity(config.seq_len);
                    s.push(cur);
                    while s.len() < config.seq_len {
                        cur = table.next(cur as usize, &mut rng);
                        s.push(cur);
                    }
                    s
                })
                .collect();
            (seqs, Some(table))
        }
        CalibrationSource::File(path) => {
            let seqs = read_sequences(path, vocab, config.seq_len)?;
            if seqs.len() < total {
                return Err(Error::Input(format!(
                    "{} holds {} sequences, need {total}",
                    path.display(),
                    seqs.len()
                )));
            }
            (seqs, None)
        }
    };
    seqs.truncate(total);
    let holdout = seqs.split_off(config.num_sequences);
    Ok(CalibrationSet {
        train: seqs,
        holdout,
        seq_len: config.seq_len,
        vocab,
        seed: config.seed,
        table,
    })
}

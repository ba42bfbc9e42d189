//! Calibration sets: small batches of token-id sequences used to score
//! similarity during compression. On disk they are JSON-lines, one object
//! per line: `{"tokens": [unsigned ints]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("calibration set is empty")]
    Empty,
    #[error("sequence {index} has length {len}; every sequence needs at least 2 tokens")]
    SequenceTooShort { index: usize, len: usize },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct CalibLine {
    tokens: Vec<u32>,
}

/// A non-empty list of token-id sequences, each at least 2 tokens long.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    sequences: Vec<Vec<u32>>,
}

impl CalibSet {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self, CalibError> {
        if sequences.is_empty() {
            return Err(CalibError::Empty);
        }
        for (index, s) in sequences.iter().enumerate() {
            if s.len() < 2 {
                return Err(CalibError::SequenceTooShort {
                    index,
                    len: s.len(),
                });
            }
        }
        Ok(Self { sequences })
    }

    /// Draws `count` sequences of length `len` with ids uniform in `[0, vocab)`.
    pub fn generate(vocab: u32, count: usize, len: usize, seed: u64) -> Result<Self, CalibError> {
        let mut sequences = Vec::with_capacity(count);
        for i in 0..count {
            let mut r = rng::rng(seed, "calib", i as u64);
            sequences.push((0..len).map(|_| r.random_range(0..vocab)).collect());
        }
        Self::new(sequences)
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CalibError> {
        let mut w = BufWriter::new(File::create(path)?);
        for s in &self.sequences {
            let line = serde_json::to_string(&CalibLine { tokens: s.clone() })
                .expect("serializing token list cannot fail");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibError> {
        let reader = BufReader::new(File::open(path)?);
        let mut sequences = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CalibLine =
                serde_json::from_str(&line).map_err(|source| CalibError::Parse {
                    line: i + 1,
                    source,
                })?;
            sequences.push(parsed.tokens);
        }
        Self::new(sequences)
    }
}

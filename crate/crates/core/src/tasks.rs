//! Synthetic sequence-to-sequence tasks with exact answers.
//!
//! Payload symbols occupy token ids `FIRST_PAYLOAD..FIRST_PAYLOAD + vocab_size`,
//! so they never collide with PAD, BOS or EOS. Sources and targets are both
//! framed as `BOS payload EOS`.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::numerics::Rng;
use crate::transformer::config::{ModelConfig, PeMode, BOS, EOS, FIRST_PAYLOAD, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    /// Target payload for a source payload.
    pub fn transform(self, payload: &[usize]) -> Vec<usize> {
        let mut out = payload.to_vec();
        match self {
            TaskKind::Copy => {}
            TaskKind::Reverse => out.reverse(),
            TaskKind::Sort => out.sort_unstable(),
        }
        out
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            _ => Err(invalid(format!("unknown task '{s}' (expected copy, reverse or sort)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of distinct payload symbols.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            vocab_size,
            min_len,
            max_len,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(invalid(format!("task vocab_size must be at least 4, got {}", self.vocab_size)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(invalid(format!(
                "task lengths need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Also checks that framed sequences fit the model's vocabulary and,
    /// under learned positions, its maximum length.
    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        self.validate()?;
        if FIRST_PAYLOAD + self.vocab_size > cfg.vocab_size {
            return Err(invalid(format!(
                "task needs a model vocabulary of {} but the model has {}",
                FIRST_PAYLOAD + self.vocab_size,
                cfg.vocab_size
            )));
        }
        if cfg.pe_mode == PeMode::Learned && self.max_len + 2 > cfg.max_len {
            return Err(invalid(format!(
                "task max_len {} + 2 exceeds model max_len {}",
                self.max_len, cfg.max_len
            )));
        }
        Ok(())
    }

    /// Smallest model vocabulary that covers this task.
    pub fn model_vocab_size(&self) -> usize {
        FIRST_PAYLOAD + self.vocab_size
    }
}

fn frame(payload: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(payload.len() + 2);
    s.push(BOS);
    s.extend_from_slice(payload);
    s.push(EOS);
    s
}

/// The payload between BOS and EOS. Sequences without the framing are
/// returned unchanged.
pub fn payload(seq: &[usize]) -> &[usize] {
    let s = seq.strip_prefix(&[BOS]).unwrap_or(seq);
    s.strip_suffix(&[EOS]).unwrap_or(s)
}

/// One random `(src, tgt)` pair, both framed by BOS and EOS.
pub fn sample_pair(spec: &TaskSpec, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    let body: Vec<usize> = (0..len).map(|_| FIRST_PAYLOAD + rng.below(spec.vocab_size)).collect();
    let tgt = spec.kind.transform(&body);
    (frame(&body), frame(&tgt))
}

/// `count` pairs drawn in order from `rng`.
pub fn sample_batch(spec: &TaskSpec, count: usize, rng: &mut Rng) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..count).map(|_| sample_pair(spec, rng)).collect()
}

fn trim_pad(s: &[usize]) -> &[usize] {
    let end = s.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    &s[..end]
}

/// Matching positions and compared positions after trailing PAD is trimmed.
/// A length mismatch counts every unmatched position as wrong.
pub fn token_matches(predicted: &[usize], target: &[usize]) -> (usize, usize) {
    let (p, t) = (trim_pad(predicted), trim_pad(target));
    let hits = p.iter().zip(t).filter(|(a, b)| a == b).count();
    (hits, p.len().max(t.len()))
}

/// Fraction of matching non-PAD positions. Two empty sequences agree fully.
pub fn token_accuracy(predicted: &[usize], target: &[usize]) -> f64 {
    match token_matches(predicted, target) {
        (_, 0) => 1.0,
        (hits, total) => hits as f64 / total as f64,
    }
}

fn fmt_tokens(s: &[usize]) -> String {
    s.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

/// Parses space-separated token ids.
pub fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| invalid(format!("bad token id '{t}'"))))
        .collect()
}

/// Writes one `src<TAB>tgt` line per pair.
pub fn dump_examples(path: &Path, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for (s, t) in pairs {
        writeln!(out, "{}\t{}", fmt_tokens(s), fmt_tokens(t))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the format written by [`dump_examples`]. Blank lines are skipped.
pub fn load_examples(path: &Path) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (s, t) = line
            .split_once('\t')
            .ok_or_else(|| invalid(format!("line {}: expected 'src<TAB>tgt'", i + 1)))?;
        pairs.push((parse_tokens(s)?, parse_tokens(t)?));
    }
    Ok(pairs)
}

//! Byte corpus with a fixed 95/5 train/validation split, batch sampling, and
//! a deterministic synthetic text generator for runs without a local corpus.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{invalid, LteError, Result};
use crate::numerics::Rng;

pub const TRAIN_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    bytes: Vec<u8>,
    split: usize,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 40 {
            return Err(invalid!(
                "corpus of {} bytes is too small to split",
                bytes.len()
            ));
        }
        let split = (bytes.len() as f64 * TRAIN_FRACTION).floor() as usize;
        Ok(Self { bytes, split })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| LteError::Config(format!("cannot read corpus {}: {e}", path.display())))?;
        Self::from_bytes(bytes)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn val(&self) -> &[u8] {
        &self.bytes[self.split..]
    }

    /// `batch` windows of `seq + 1` bytes from the training split at random
    /// offsets, returned as (inputs, targets) of `batch·seq` bytes each.
    pub fn sample_batch(
        &self,
        rng: &mut Rng,
        batch: usize,
        seq: usize,
    ) -> Result<(Vec<u8>, Vec<u8>)> {
        windows_at(
            self.train(),
            seq,
            (0..batch).map(|_| rng.below(self.train().len().saturating_sub(seq))),
        )
    }

    /// Consecutive non-overlapping windows from the validation split covering
    /// at most `max_tokens` targets, grouped into batches.
    pub fn val_batches(
        &self,
        batch: usize,
        seq: usize,
        max_tokens: usize,
    ) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let val = self.val();
        if val.len() < seq + 1 {
            return Err(invalid!(
                "validation split of {} bytes is shorter than one window of {seq}",
                val.len()
            ));
        }
        let n_windows = ((val.len() - 1) / seq).min((max_tokens / seq).max(1));
        let offsets: Vec<usize> = (0..n_windows).map(|i| i * seq).collect();
        offsets
            .chunks(batch)
            .map(|c| windows_at(val, seq, c.iter().copied()))
            .collect()
    }
}

fn windows_at(
    src: &[u8],
    seq: usize,
    offsets: impl Iterator<Item = usize>,
) -> Result<(Vec<u8>, Vec<u8>)> {
    if src.len() < seq + 1 {
        return Err(invalid!(
            "{} bytes cannot hold a window of {seq}",
            src.len()
        ));
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for o in offsets {
        x.extend_from_slice(&src[o..o + seq]);
        y.extend_from_slice(&src[o + 1..o + seq + 1]);
    }
    Ok((x, y))
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const NAMES: &[&str] = &[
    "Ada", "Boris", "Chen", "Dara", "Emil", "Farah", "Goran", "Hana", "Ivo", "Jun",
];
const NOUNS: &[&str] = &[
    "river", "engine", "garden", "letter", "market", "window", "signal", "harbor", "kettle",
    "ladder", "meadow", "bridge", "lantern", "orchard", "compass", "mirror", "village", "station",
    "valley", "furnace",
];
const ADJS: &[&str] = &[
    "quiet", "bright", "narrow", "heavy", "broken", "golden", "distant", "early", "cold", "green",
];
const VERBS: &[&str] = &[
    "repaired", "painted", "carried", "opened", "followed", "measured", "crossed", "cleaned",
    "built", "found",
];
const PLACES: &[&str] = &["north", "south", "east", "west"];
const KEYS: &[&str] = &[
    "width", "height", "speed", "count", "depth", "weight", "level", "rate",
];

fn pick<'a>(rng: &mut Rng, v: &[&'a str]) -> &'a str {
    v[rng.below(v.len())]
}

fn capitalised(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn prose(rng: &mut Rng, out: &mut String) {
    for _ in 0..3 + rng.below(4) {
        let s = match rng.below(4) {
            0 => format!(
                "{} {} the {} {}.",
                pick(rng, NAMES),
                pick(rng, VERBS),
                pick(rng, ADJS),
                pick(rng, NOUNS)
            ),
            1 => format!(
                "The {} {} near the {} was {}.",
                pick(rng, ADJS),
                pick(rng, NOUNS),
                pick(rng, NOUNS),
                pick(rng, ADJS)
            ),
            2 => format!(
                "{} of the {} {} {} the {}.",
                capitalised(pick(rng, PLACES)),
                pick(rng, NOUNS),
                pick(rng, NAMES),
                pick(rng, VERBS),
                pick(rng, NOUNS)
            ),
            _ => format!(
                "When {} {} the {}, {} {} the {}.",
                pick(rng, NAMES),
                pick(rng, VERBS),
                pick(rng, NOUNS),
                pick(rng, NAMES),
                pick(rng, VERBS),
                pick(rng, NOUNS)
            ),
        };
        out.push_str(&s);
        out.push(' ');
    }
    out.push('\n');
}

fn dialogue(rng: &mut Rng, out: &mut String) {
    for _ in 0..2 + rng.below(3) {
        let _ = writeln!(
            out,
            "{}: \"Is the {} {} yet?\"\n{}: \"Not yet, the {} is {}.\"",
            pick(rng, NAMES),
            pick(rng, NOUNS),
            pick(rng, VERBS),
            pick(rng, NAMES),
            pick(rng, NOUNS),
            pick(rng, ADJS)
        );
    }
}

fn table(rng: &mut Rng, out: &mut String) {
    let _ = writeln!(out, "[{}]", pick(rng, NOUNS));
    for _ in 0..3 + rng.below(4) {
        let _ = writeln!(out, "{} = {}", pick(rng, KEYS), rng.below(1000));
    }
}

fn arithmetic(rng: &mut Rng, out: &mut String) {
    for _ in 0..4 + rng.below(4) {
        let (a, b) = (rng.below(100), rng.below(100));
        let _ = write!(out, "{a} + {b} = {}; ", a + b);
    }
    out.push('\n');
}

/// Roughly `len` bytes of English-like text mixing prose, dialogue,
/// key/value tables and sums. Deterministic in `seed`.
pub fn synthetic_text(len: usize, seed: u64) -> String {
    let mut rng = Rng::new(seed);
    let mut out = String::with_capacity(len + 256);
    while out.len() < len {
        match rng.below(8) {
            0..=3 => prose(&mut rng, &mut out),
            4 | 5 => dialogue(&mut rng, &mut out),
            6 => table(&mut rng, &mut out),
            _ => arithmetic(&mut rng, &mut out),
        }
        out.push('\n');
    }
    out.truncate(len);
    out
}

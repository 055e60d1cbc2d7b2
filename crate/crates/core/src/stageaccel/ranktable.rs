use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{select_rank, singular_values};
use crate::varengine::VarModel;

/// First line of every rank-table text file.
pub const RANK_TABLE_HEADER: &str = "stagevar-ranktable v1";

/// Alphas closer than this are the same key.
const ALPHA_TOL: f64 = 1e-12;

/// Statistics of `r / M` for one `(block, scale, alpha)` over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub block: usize,
    pub scale: usize,
    pub alpha: f64,
    pub mean_fraction: f64,
    /// Population standard deviation.
    pub std_fraction: f64,
    pub sample_count: usize,
}

/// Token count `M` of a scale the table covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleTokens {
    pub scale: usize,
    pub tokens: usize,
}

/// Predetermined rank fractions per `(block, scale, alpha)`. Immutable once
/// built; a missing key is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub blocks: usize,
    pub scales: Vec<ScaleTokens>,
    pub alphas: Vec<f64>,
    /// Block inputs that were all zero and left out of the statistics.
    pub excluded: usize,
    /// Sorted by `(alpha index, scale, block)`.
    pub entries: Vec<RankEntry>,
}

fn same_alpha(a: f64, b: f64) -> bool {
    (a - b).abs() <= ALPHA_TOL
}

impl RankTable {
    pub fn get(&self, block: usize, scale: usize, alpha: f64) -> Result<&RankEntry> {
        self.entries
            .iter()
            .find(|e| e.block == block && e.scale == scale && same_alpha(e.alpha, alpha))
            .ok_or(Error::MissingRankEntry { block, scale, alpha })
    }

    pub fn tokens(&self, scale: usize) -> Option<usize> {
        self.scales.iter().find(|s| s.scale == scale).map(|s| s.tokens)
    }

    /// `round(mean_fraction * M)`, clamped to `1..=M`.
    pub fn rank_for(&self, block: usize, scale: usize, alpha: f64) -> Result<usize> {
        let e = self.get(block, scale, alpha)?;
        let m = self
            .tokens(scale)
            .ok_or(Error::MissingRankEntry { block, scale, alpha })?;
        Ok(((e.mean_fraction * m as f64).round() as usize).clamp(1, m))
    }

    pub fn has_alpha(&self, alpha: f64) -> bool {
        self.alphas.iter().any(|&a| same_alpha(a, alpha))
    }

    /// Versioned text form: keyword lines that [`RankTable::from_text`]
    /// reads back exactly, followed by a block x scale grid of
    /// `mean ± std` percentages as `#` comments.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{RANK_TABLE_HEADER}");
        let _ = writeln!(out, "blocks {}", self.blocks);
        for s in &self.scales {
            let _ = writeln!(out, "tokens {} {}", s.scale, s.tokens);
        }
        let alphas: Vec<String> = self.alphas.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(out, "alphas {}", alphas.join(" "));
        let _ = writeln!(out, "excluded {}", self.excluded);
        let _ = writeln!(out, "# cell block scale alpha mean_fraction std_fraction samples");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "cell {} {} {} {} {} {}",
                e.block, e.scale, e.alpha, e.mean_fraction, e.std_fraction, e.sample_count
            );
        }
        out.push_str(&self.grid_text());
        out
    }

    /// Human-readable `block x scale` grid per alpha, every line a comment.
    pub fn grid_text(&self) -> String {
        let mut out = String::new();
        for &alpha in &self.alphas {
            let _ = writeln!(out, "#");
            let _ = writeln!(out, "# alpha {alpha}: rank / M in percent, mean ± std");
            let mut head = format!("# {:>5}", "block");
            for s in &self.scales {
                head.push_str(&format!(" {:>16}", format!("k={} M={}", s.scale, s.tokens)));
            }
            let _ = writeln!(out, "{head}");
            for b in 0..self.blocks {
                let mut line = format!("# {b:>5}");
                for s in &self.scales {
                    let cell = match self.get(b, s.scale, alpha) {
                        Ok(e) => format!("{:.2}±{:.2}", 100.0 * e.mean_fraction, 100.0 * e.std_fraction),
                        Err(_) => "-".to_string(),
                    };
                    line.push_str(&format!(" {cell:>16}"));
                }
                let _ = writeln!(out, "{line}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == RANK_TABLE_HEADER => {}
            other => {
                return Err(Error::Parse(format!(
                    "expected header {RANK_TABLE_HEADER:?}, found {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut table = RankTable {
            blocks: 0,
            scales: Vec::new(),
            alphas: Vec::new(),
            excluded: 0,
            entries: Vec::new(),
        };
        let mut saw_blocks = false;
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("line {}: {what}: {line:?}", n + 2));
            let mut words = line.split_whitespace();
            let key = words.next().unwrap_or("");
            let rest: Vec<&str> = words.collect();
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            match (key, rest.len()) {
                ("blocks", 1) => {
                    table.blocks = int(rest[0])?;
                    saw_blocks = true;
                }
                ("tokens", 2) => table.scales.push(ScaleTokens {
                    scale: int(rest[0])?,
                    tokens: int(rest[1])?,
                }),
                ("alphas", _) => {
                    table.alphas = rest.iter().map(|s| real(s)).collect::<Result<_>>()?;
                }
                ("excluded", 1) => table.excluded = int(rest[0])?,
                ("cell", 6) => table.entries.push(RankEntry {
                    block: int(rest[0])?,
                    scale: int(rest[1])?,
                    alpha: real(rest[2])?,
                    mean_fraction: real(rest[3])?,
                    std_fraction: real(rest[4])?,
                    sample_count: int(rest[5])?,
                }),
                _ => return Err(bad("unrecognised line")),
            }
        }
        if !saw_blocks {
            return Err(Error::Parse("missing blocks line".into()));
        }
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(e.mean_fraction > 0.0 && e.mean_fraction <= 1.0) || !(e.std_fraction >= 0.0) {
                return Err(Error::Parse(format!(
                    "cell ({}, {}, {}) has mean {} and std {}",
                    e.block, e.scale, e.alpha, e.mean_fraction, e.std_fraction
                )));
            }
            if e.block >= self.blocks || self.tokens(e.scale).is_none() || !self.has_alpha(e.alpha) {
                return Err(Error::Parse(format!(
                    "cell ({}, {}, {}) is outside the declared blocks, scales or alphas",
                    e.block, e.scale, e.alpha
                )));
            }
        }
        Ok(())
    }
}

/// Accumulates per-cell rank fractions from observed block inputs.
#[derive(Debug, Clone)]
pub struct RankTableBuilder {
    blocks: usize,
    alphas: Vec<f64>,
    tokens: BTreeMap<usize, usize>,
    samples: BTreeMap<(usize, usize, usize), Vec<f64>>,
    excluded: usize,
}

impl RankTableBuilder {
    pub fn new(blocks: usize, alphas: &[f64]) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Config("rank table needs at least one alpha".into()));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::Config(format!("rank-table alpha {a} outside (0, 1]")));
        }
        Ok(Self {
            blocks,
            alphas: alphas.to_vec(),
            tokens: BTreeMap::new(),
            samples: BTreeMap::new(),
            excluded: 0,
        })
    }

    /// Records `select_rank / M` of one block input for every alpha. An
    /// all-zero input is counted in `excluded` and otherwise ignored.
    pub fn observe(&mut self, scale: usize, block: usize, x: &Array2<f64>) -> Result<()> {
        if block >= self.blocks {
            return Err(Error::OutOfRange(format!("block {block} of {}", self.blocks)));
        }
        let m = x.nrows();
        if *self.tokens.entry(scale).or_insert(m) != m {
            return Err(Error::DimensionMismatch(format!("scale {scale} seen with two token counts")));
        }
        if x.iter().all(|&v| v == 0.0) {
            self.excluded += 1;
            return Ok(());
        }
        let sigma = singular_values(x)?;
        let sigma = sigma.as_slice().expect("contiguous");
        for (i, &alpha) in self.alphas.iter().enumerate() {
            let r = select_rank(sigma, alpha)?;
            self.samples
                .entry((i, scale, block))
                .or_default()
                .push(r as f64 / m as f64);
        }
        Ok(())
    }

    pub fn finish(self) -> RankTable {
        let entries = self
            .samples
            .iter()
            .map(|(&(i, scale, block), xs)| {
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                RankEntry {
                    block,
                    scale,
                    alpha: self.alphas[i],
                    mean_fraction: mean,
                    std_fraction: var.sqrt(),
                    sample_count: xs.len(),
                }
            })
            .collect();
        RankTable {
            blocks: self.blocks,
            scales: self
                .tokens
                .iter()
                .map(|(&scale, &tokens)| ScaleTokens { scale, tokens })
                .collect(),
            alphas: self.alphas,
            excluded: self.excluded,
            entries,
        }
    }
}

/// Runs guided vanilla generation for every corpus seed and records the
/// rank fractions of each block input of the unconditional pass at every
/// refinement scale.
pub fn build_rank_table(model: &VarModel, corpus_seeds: &[u64], alphas: &[f64], g: f64) -> Result<RankTable> {
    if corpus_seeds.is_empty() {
        return Err(Error::Config("rank-table corpus is empty".into()));
    }
    if model.schedule.num_refinement() == 0 {
        return Err(Error::Config("schedule has no refinement scale".into()));
    }
    let mut builder = RankTableBuilder::new(model.predictor.num_blocks(), alphas)?;
    for &seed in corpus_seeds {
        let mut failure = None;
        model.generate_vanilla_observed(seed, g, &mut |k, b, x| {
            if failure.is_none() && model.schedule.is_refinement(k) {
                failure = builder.observe(k, b, x).err();
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(builder.finish())
}

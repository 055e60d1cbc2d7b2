use serde::Serialize;

use crate::matgrid::{FeatureMap, Grid};

use super::predictor::FlopCount;

/// Wall-clock attribution of one scale. `model_secs` is time inside block
/// calls; `strategy_secs` is the rest of the refinement forward (the
/// accelerator's overhead); `other_secs` covers quantization and resampling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ScaleTiming {
    pub model_secs: f64,
    pub strategy_secs: f64,
    pub other_secs: f64,
}

impl ScaleTiming {
    pub fn total(&self) -> f64 {
        self.model_secs + self.strategy_secs + self.other_secs
    }
}

/// Per-block measurement of a rank-`r` truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationCheck {
    pub block: usize,
    pub rank: usize,
    /// `‖X − X_r‖_F` as computed.
    pub error: f64,
    /// `sqrt(Σ_{i>r} σ_i²)`.
    pub tail: f64,
}

/// Everything recorded for one executed scale.
#[derive(Debug, Clone)]
pub struct ScaleRecord {
    pub scale: usize,
    pub grid: Grid,
    /// `R_k`.
    pub tokens: Vec<usize>,
    /// `F_k`, the running feature at the full grid.
    pub feature: FeatureMap,
    /// `F_k^o`, the (guided) block-stack output at this scale's grid.
    pub output: FeatureMap,
    pub flops: FlopCount,
    /// Number of full block-stack passes (1 unguided, 2 guided).
    pub forwards: usize,
    /// Rank used at each block; empty for unaccelerated scales.
    pub block_ranks: Vec<usize>,
    pub truncation: Vec<TruncationCheck>,
    pub timing: ScaleTiming,
}

impl ScaleRecord {
    /// Equality of everything except wall-clock timing.
    pub fn content_eq(&self, other: &Self) -> bool {
        self.scale == other.scale
            && self.grid == other.grid
            && self.tokens == other.tokens
            && self.feature == other.feature
            && self.output == other.output
            && self.flops == other.flops
            && self.forwards == other.forwards
            && self.block_ranks == other.block_ranks
            && self.truncation == other.truncation
    }
}

/// Record of one generation run: executed scales in order plus the indices
/// of scales that were skipped.
#[derive(Debug, Clone, Default)]
pub struct GenerationTrace {
    pub records: Vec<ScaleRecord>,
    pub skipped: Vec<usize>,
}

impl GenerationTrace {
    pub fn content_eq(&self, other: &Self) -> bool {
        self.skipped == other.skipped
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.content_eq(b))
    }

    pub fn record(&self, scale: usize) -> Option<&ScaleRecord> {
        self.records.iter().find(|r| r.scale == scale)
    }

    /// FLOPs summed over executed scales with index `>= from`.
    pub fn flops_from(&self, from: usize) -> FlopCount {
        self.records
            .iter()
            .filter(|r| r.scale >= from)
            .fold(FlopCount::default(), |acc, r| acc + r.flops)
    }

    pub fn totals(&self) -> TraceTotals {
        let mut t = TraceTotals {
            runs: 1,
            ..TraceTotals::default()
        };
        for r in &self.records {
            t.flops += r.flops;
            t.forwards += r.forwards;
            t.scales += 1;
            t.model_secs += r.timing.model_secs;
            t.strategy_secs += r.timing.strategy_secs;
            t.other_secs += r.timing.other_secs;
        }
        t
    }
}

/// Additive summary of one or more runs; `merge` is associative and
/// commutative on the integer fields.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TraceTotals {
    pub runs: usize,
    pub scales: usize,
    pub forwards: usize,
    pub flops: FlopCount,
    pub model_secs: f64,
    pub strategy_secs: f64,
    pub other_secs: f64,
}

impl TraceTotals {
    pub fn merge(self, other: Self) -> Self {
        Self {
            runs: self.runs + other.runs,
            scales: self.scales + other.scales,
            forwards: self.forwards + other.forwards,
            flops: self.flops + other.flops,
            model_secs: self.model_secs + other.model_secs,
            strategy_secs: self.strategy_secs + other.strategy_secs,
            other_secs: self.other_secs + other.other_secs,
        }
    }
}

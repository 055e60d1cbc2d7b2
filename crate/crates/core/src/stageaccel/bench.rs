use crate::error::{Error, Result};
use crate::matgrid::FeatureMap;
use crate::varengine::{Condition, FlopCount};

use super::refine::{Accelerator, RefinementOutput};
use super::restore::OutputCache;

/// Median wall times of repeated refinement forwards on a fixed input.
#[derive(Debug, Clone)]
pub struct RefinementTiming {
    pub mod_secs: f64,
    pub add_secs: f64,
    pub flops: FlopCount,
    pub block_ranks: Vec<usize>,
    /// Output of the last timed repeat.
    pub output: FeatureMap,
    pub repeats: usize,
}

/// Median of a nonempty sample; the mean of the middle pair for even sizes.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `warmup` untimed and `repeats` timed refinement forwards of scale
/// `k` and reports the medians of the Mod. and Add. columns.
#[allow(clippy::too_many_arguments)]
pub fn time_refinement(
    acc: &Accelerator<'_>,
    k: usize,
    input: &FeatureMap,
    cache: Option<&OutputCache>,
    cond: &Condition,
    g: f64,
    warmup: usize,
    repeats: usize,
) -> Result<RefinementTiming> {
    if repeats == 0 {
        return Err(Error::Config("timing needs at least one repeat".into()));
    }
    for _ in 0..warmup {
        acc.refinement_forward(k, input, cache, cond, g)?;
    }
    let mut model = Vec::with_capacity(repeats);
    let mut extra = Vec::with_capacity(repeats);
    let mut last: Option<RefinementOutput> = None;
    for _ in 0..repeats {
        let out = acc.refinement_forward(k, input, cache, cond, g)?;
        model.push(out.model_secs);
        extra.push(out.strategy_secs);
        last = Some(out);
    }
    let last = last.expect("repeats > 0");
    Ok(RefinementTiming {
        mod_secs: median(&model),
        add_secs: median(&extra),
        flops: last.flops,
        block_ranks: last.block_ranks,
        output: last.output,
        repeats,
    })
}

//! Instruments over generation traces: spectral deltas between scales,
//! distance-to-final curves, threshold sweeps, and their CSV form.
//!
//! These are feature-space proxies. Nothing here scores images; the metric
//! names say what is measured (`low_band_delta`, `distance_to_final`,
//! `rel_error`) so they cannot be mistaken for perceptual scores.
//!
//! Sums run in a fixed order (seed order, then scale order), so reports are
//! bit-reproducible for fixed inputs.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matgrid::{spectrum_split, upsample, FeatureMap};
use crate::stageaccel::{generate_stagevar, RankTable, StageConfig, Strategy};
use crate::varengine::{GenerationTrace, VarModel};

/// Rank fractions measured on a large pretrained backbone for these energy
/// thresholds. Kept as report metadata for comparison; the toy model is not
/// expected to reproduce them.
pub const REFERENCE_RANK_FRACTIONS: [(f64, f64); 6] = [
    (0.999, 0.595),
    (0.99, 0.344),
    (0.98, 0.261),
    (0.97, 0.211),
    (0.96, 0.176),
    (0.95, 0.149),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub scale: usize,
    pub value: f64,
}

/// One named per-scale series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleCurve {
    pub metric: String,
    pub points: Vec<CurvePoint>,
}

impl ScaleCurve {
    fn new(metric: &str) -> Self {
        Self {
            metric: metric.to_string(),
            points: Vec::new(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }
}

/// Low- and high-band energy of `F_k − F_{k'}` for consecutive executed
/// scales `k' < k`, indexed by `k`.
pub fn frequency_evolution(trace: &GenerationTrace, cutoff: f64) -> Result<(ScaleCurve, ScaleCurve)> {
    if trace.records.is_empty() {
        return Err(Error::Config("frequency evolution of an empty trace".into()));
    }
    let mut low = ScaleCurve::new("low_band_delta");
    let mut high = ScaleCurve::new("high_band_delta");
    for pair in trace.records.windows(2) {
        let (prev, cur) = (&pair[0].feature, &pair[1].feature);
        let delta = FeatureMap::new(cur.data() - prev.data(), cur.grid())?;
        let split = spectrum_split(&delta, cutoff)?;
        low.points.push(CurvePoint {
            scale: pair[1].scale,
            value: split.low_energy,
        });
        high.points.push(CurvePoint {
            scale: pair[1].scale,
            value: split.high_energy,
        });
    }
    Ok((low, high))
}

/// `‖Up(F_k) − F_K‖_F / ‖F_K‖_F` per executed scale (absolute distance if
/// `F_K = 0`).
pub fn convergence_curve(trace: &GenerationTrace) -> Result<ScaleCurve> {
    let mut curve = ScaleCurve::new("distance_to_final");
    let Some(last) = trace.records.last() else {
        return Ok(curve);
    };
    let last = &last.feature;
    for r in &trace.records {
        let up = upsample(&r.feature, last.grid())?;
        curve.points.push(CurvePoint {
            scale: r.scale,
            value: up.relative_error(last)?,
        });
    }
    Ok(curve)
}

/// Largest `|error − tail| / max(tail, 1)` over the truncation checks of a
/// trace; zero when there are none.
pub fn truncation_gap(trace: &GenerationTrace) -> f64 {
    trace
        .records
        .iter()
        .flat_map(|r| r.truncation.iter())
        .map(|c| (c.error - c.tail).abs() / c.tail.max(1.0))
        .fold(0.0, f64::max)
}

/// One threshold of a sweep, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    /// Mean `r / M` over refinement blocks; 1 for strategies that keep `M`.
    pub mean_rank_fraction: f64,
    /// Final-feature error against strategy ① under the same guidance settings.
    pub rel_error: f64,
    pub mod_secs: f64,
    pub add_secs: f64,
    /// Refinement-stage counts per run.
    pub attention_flops: f64,
    pub total_flops: f64,
}

/// Runs `base` with the same `α` at every refinement scale, once per
/// threshold and seed.
pub fn alpha_sweep(
    model: &VarModel,
    prompt_seeds: &[u64],
    alphas: &[f64],
    base: &StageConfig,
    table: Option<&RankTable>,
    g: f64,
) -> Result<Vec<SweepRow>> {
    if prompt_seeds.is_empty() || alphas.is_empty() {
        return Err(Error::Config("sweep needs at least one seed and one alpha".into()));
    }
    let sched = &model.schedule;
    let reference_cfg = StageConfig {
        alphas: vec![1.0; sched.num_refinement()],
        strategy: Strategy::Vanilla,
        ..base.clone()
    };
    let references = prompt_seeds
        .iter()
        .map(|&s| generate_stagevar(model, &reference_cfg, None, s, g).map(|(f, _)| f))
        .collect::<Result<Vec<_>>>()?;
    let n = prompt_seeds.len() as f64;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = StageConfig {
            alphas: vec![alpha; sched.num_refinement()],
            ..base.clone()
        };
        let mut row = SweepRow {
            alpha,
            mean_rank_fraction: 0.0,
            rel_error: 0.0,
            mod_secs: 0.0,
            add_secs: 0.0,
            attention_flops: 0.0,
            total_flops: 0.0,
        };
        for (&seed, reference) in prompt_seeds.iter().zip(&references) {
            let (f, trace) = generate_stagevar(model, &cfg, table, seed, g)?;
            row.rel_error += f.relative_error(reference)? / n;
            let (mut fractions, mut count) = (0.0, 0usize);
            for r in trace.records.iter().filter(|r| sched.is_refinement(r.scale)) {
                row.mod_secs += r.timing.model_secs / n;
                row.add_secs += r.timing.strategy_secs / n;
                row.attention_flops += r.flops.attention as f64 / n;
                row.total_flops += r.flops.total() as f64 / n;
                let m = r.grid.tokens() as f64;
                if r.block_ranks.is_empty() {
                    fractions += 1.0;
                    count += 1;
                } else {
                    fractions += r.block_ranks.iter().map(|&k| k as f64 / m).sum::<f64>();
                    count += r.block_ranks.len();
                }
            }
            if count > 0 {
                row.mean_rank_fraction += fractions / count as f64 / n;
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// `# key: value` lines. Report files start with these, then the header row.
pub fn metadata_lines(meta: &[(&str, String)]) -> String {
    meta.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect()
}

/// Columns `metric,scale,value`, one row per point.
pub fn curves_csv(curves: &[ScaleCurve]) -> String {
    let mut out = String::from("metric,scale,value\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(out, "{},{},{:e}", c.metric, p.scale, p.value);
        }
    }
    out
}

/// Columns `alpha,mean_rank_fraction,reference_rank_fraction,rel_error,
/// mod_secs,add_secs,attention_flops,total_flops`. The reference column is
/// empty for thresholds without a reference value.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "alpha,mean_rank_fraction,reference_rank_fraction,rel_error,mod_secs,add_secs,attention_flops,total_flops\n",
    );
    for r in rows {
        let reference = REFERENCE_RANK_FRACTIONS
            .iter()
            .find(|(a, _)| (a - r.alpha).abs() < 1e-12)
            .map(|(_, f)| f.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:e},{},{:e},{:.6},{:.6},{:e},{:e}",
            r.alpha,
            r.mean_rank_fraction,
            reference,
            r.rel_error,
            r.mod_secs,
            r.add_secs,
            r.attention_flops,
            r.total_flops
        );
    }
    out
}

/// The reference fractions as one metadata value.
pub fn reference_fractions_text() -> String {
    REFERENCE_RANK_FRACTIONS
        .iter()
        .map(|(a, f)| format!("{a}={f}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matgrid::Grid;
    use crate::varengine::{FlopCount, ScaleRecord, ScaleTiming};

    fn record(scale: usize, feature: FeatureMap) -> ScaleRecord {
        ScaleRecord {
            scale,
            grid: feature.grid(),
            tokens: Vec::new(),
            output: feature.clone(),
            feature,
            flops: FlopCount::default(),
            forwards: 1,
            block_ranks: Vec::new(),
            truncation: Vec::new(),
            timing: ScaleTiming::default(),
        }
    }

    #[test]
    fn single_scale_has_no_deltas() {
        let f = FeatureMap::constant(Grid::new(2, 2), &[1.0, 2.0]).unwrap();
        let trace = GenerationTrace {
            records: vec![record(0, f)],
            skipped: Vec::new(),
        };
        let (low, high) = frequency_evolution(&trace, 0.25).unwrap();
        assert!(low.points.is_empty() && high.points.is_empty());
        let c = convergence_curve(&trace).unwrap();
        assert_eq!(c.values(), vec![0.0]);
        assert!(frequency_evolution(&GenerationTrace::default(), 0.25).is_err());
    }

    #[test]
    fn constant_trace_is_flat() {
        let f = FeatureMap::constant(Grid::new(2, 2), &[1.0, -1.0]).unwrap();
        let trace = GenerationTrace {
            records: (0..3).map(|k| record(k, f.clone())).collect(),
            skipped: Vec::new(),
        };
        let (low, high) = frequency_evolution(&trace, 0.25).unwrap();
        assert_eq!(low.values(), vec![0.0, 0.0]);
        assert_eq!(high.values(), vec![0.0, 0.0]);
        assert_eq!(convergence_curve(&trace).unwrap().values(), vec![0.0; 3]);
    }

    #[test]
    fn csv_has_headers_and_reference_column() {
        let curve = ScaleCurve {
            metric: "distance_to_final".into(),
            points: vec![CurvePoint { scale: 3, value: 0.5 }],
        };
        assert_eq!(curves_csv(&[curve]), "metric,scale,value\ndistance_to_final,3,5e-1\n");
        let row = SweepRow {
            alpha: 0.96,
            mean_rank_fraction: 0.01,
            rel_error: 0.1,
            mod_secs: 0.0,
            add_secs: 0.0,
            attention_flops: 1.0,
            total_flops: 2.0,
        };
        let csv = sweep_csv(&[row.clone(), SweepRow { alpha: 0.5, ..row }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.96,1e-2,0.176,"), "{}", lines[1]);
        assert!(lines[2].starts_with("0.5,1e-2,,"), "{}", lines[2]);
        assert_eq!(metadata_lines(&[("config_hash", "ab".into())]), "# config_hash: ab\n");
    }
}

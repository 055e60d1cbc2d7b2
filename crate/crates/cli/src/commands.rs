//! The four commands. Each validates its whole configuration before any
//! generation runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use stagevar_core::analysis::{
    alpha_sweep, convergence_curve, curves_csv, frequency_evolution, metadata_lines, reference_fractions_text,
    sweep_csv, SweepRow,
};
use stagevar_core::matgrid::{FeatureMap, DEFAULT_CUTOFF};
use stagevar_core::stageaccel::{build_rank_table, median, Accelerator, RankTable, StageConfig, Strategy};
use stagevar_core::varengine::{decode_to_image, GenerationTrace, VarModel};

use crate::config::{Format, RunConfig, Variant};
use crate::output::{ppm_with_hash, to_json, token_hash, write_atomic};
use crate::CliError;

#[derive(Debug, Serialize)]
struct TraceRow {
    scale: usize,
    h: usize,
    w: usize,
    forwards: usize,
    attention_flops: u64,
    mlp_flops: u64,
    block_ranks: Vec<usize>,
    distinct_tokens: usize,
    tokens_sha256: String,
    feature_norm: f64,
    output_norm: f64,
}

#[derive(Debug, Serialize)]
struct TraceReport<'a> {
    config_hash: &'a str,
    variant: String,
    seed: u64,
    skipped: &'a [usize],
    scales: Vec<TraceRow>,
}

fn trace_rows(trace: &GenerationTrace) -> Vec<TraceRow> {
    trace
        .records
        .iter()
        .map(|r| {
            let mut distinct = r.tokens.clone();
            distinct.sort_unstable();
            distinct.dedup();
            TraceRow {
                scale: r.scale,
                h: r.grid.h,
                w: r.grid.w,
                forwards: r.forwards,
                attention_flops: r.flops.attention,
                mlp_flops: r.flops.mlp,
                block_ranks: r.block_ranks.clone(),
                distinct_tokens: distinct.len(),
                tokens_sha256: token_hash(&r.tokens),
                feature_norm: r.feature.frobenius_norm(),
                output_norm: r.output.frobenius_norm(),
            }
        })
        .collect()
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn trace_csv(report: &TraceReport<'_>) -> String {
    let mut out = metadata_lines(&[
        ("config_hash", report.config_hash.to_string()),
        ("variant", report.variant.clone()),
        ("seed", report.seed.to_string()),
        ("skipped", join(report.skipped, ";")),
    ]);
    out.push_str(
        "scale,h,w,forwards,attention_flops,mlp_flops,block_ranks,distinct_tokens,tokens_sha256,feature_norm,output_norm\n",
    );
    for r in &report.scales {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:e},{:e}",
            r.scale,
            r.h,
            r.w,
            r.forwards,
            r.attention_flops,
            r.mlp_flops,
            join(&r.block_ranks, ";"),
            r.distinct_tokens,
            r.tokens_sha256,
            r.feature_norm,
            r.output_norm
        );
    }
    out
}

/// Where a rank table came from, for the manifest.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
enum TableSource {
    None,
    File(String),
    Corpus { seeds: Vec<u64>, alphas: Vec<f64> },
}

fn nonzero_alphas(alphas: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &a in alphas.iter().filter(|&&a| a > 0.0) {
        if !out.contains(&a) {
            out.push(a);
        }
    }
    out
}

fn load_or_build_table(
    cfg: &RunConfig,
    model: &VarModel,
    alphas: &[f64],
) -> Result<(RankTable, TableSource), CliError> {
    if let Some(path) = &cfg.rank_table {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("rank table {}: {e}", path.display())))?;
        let table = RankTable::from_text(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(a) = alphas.iter().find(|&&a| !table.has_alpha(a)) {
            return Err(CliError::Config(format!("rank table {} has no alpha {a}", path.display())));
        }
        return Ok((table, TableSource::File(path.display().to_string())));
    }
    if cfg.corpus_seeds.is_empty() {
        return Err(CliError::Config("strategies 4-6 need rank_table or corpus_seeds".into()));
    }
    let table = build_rank_table(model, &cfg.corpus_seeds, alphas, cfg.guidance).map_err(CliError::from_core)?;
    Ok((
        table,
        TableSource::Corpus {
            seeds: cfg.corpus_seeds.clone(),
            alphas: alphas.to_vec(),
        },
    ))
}

fn run_variant(
    model: &VarModel,
    variant: Variant,
    stage: Option<&StageConfig>,
    table: Option<&RankTable>,
    seed: u64,
    g: f64,
) -> Result<(FeatureMap, GenerationTrace), CliError> {
    match (variant, stage) {
        (Variant::Vanilla, _) => model.generate_vanilla(seed, g),
        (Variant::Staged(_), Some(stage)) => Accelerator::new(model, stage, table).and_then(|a| a.generate(seed, g)),
        (Variant::Staged(_), None) => unreachable!("staged variants carry a stage config"),
    }
    .map_err(CliError::from_core)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'static str,
    config_hash: &'a str,
    variant: String,
    strategy: Option<usize>,
    strategy_name: &'static str,
    seeds: &'a [u64],
    skipped: Vec<usize>,
    rank_table: TableSource,
    files: Vec<String>,
    config: &'a RunConfig,
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let hash = cfg.hash();
    let model = cfg.build_model()?;
    let stage = match cfg.variant.strategy() {
        Some(s) => Some(cfg.stage_config(&model, s)?),
        None => None,
    };
    let (table, source) = match &stage {
        Some(st) if st.strategy.uses_rank_table() => {
            let (t, s) = load_or_build_table(cfg, &model, &nonzero_alphas(&st.alphas))?;
            (Some(t), s)
        }
        _ => (None, TableSource::None),
    };
    let out = cfg.out.as_path();
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    for &seed in &cfg.seeds {
        let (f, trace) = run_variant(&model, cfg.variant, stage.as_ref(), table.as_ref(), seed, cfg.guidance)?;
        let raster = decode_to_image(&f).map_err(CliError::from_core)?;
        let image = format!("image_seed{seed}.ppm");
        write_atomic(out, &image, &ppm_with_hash(&raster, &hash))?;
        let report = TraceReport {
            config_hash: &hash,
            variant: cfg.variant.to_string(),
            seed,
            skipped: &trace.skipped,
            scales: trace_rows(&trace),
        };
        let name = format!("trace_seed{seed}.{}", cfg.format.extension());
        let bytes = match cfg.format {
            Format::Csv => trace_csv(&report).into_bytes(),
            Format::Json => to_json(&report),
        };
        write_atomic(out, &name, &bytes)?;
        files.push(image);
        files.push(name);
        skipped = trace.skipped.clone();
    }
    files.push("manifest.json".into());
    let manifest = Manifest {
        command: "generate",
        config_hash: &hash,
        variant: cfg.variant.to_string(),
        strategy: cfg.variant.strategy().map(Strategy::number),
        strategy_name: cfg.variant.name(),
        seeds: &cfg.seeds,
        skipped,
        rank_table: source,
        files,
        config: cfg,
    };
    write_atomic(out, "manifest.json", &to_json(&manifest))?;
    Ok(())
}

pub fn rank_stats(cfg: &RunConfig) -> Result<(), CliError> {
    let hash = cfg.hash();
    let model = cfg.build_model()?;
    let table =
        build_rank_table(&model, &cfg.corpus_seeds, &cfg.rank_alphas, cfg.guidance).map_err(CliError::from_core)?;
    let mut text = table.to_text();
    let _ = writeln!(text, "# config_hash: {hash}");
    let _ = writeln!(text, "# corpus_seeds: {}", join(&cfg.corpus_seeds, ","));
    write_atomic(&cfg.out, "ranktable.txt", text.as_bytes())?;
    if cfg.format == Format::Json {
        #[derive(Serialize)]
        struct Wrapped<'a> {
            config_hash: &'a str,
            corpus_seeds: &'a [u64],
            table: &'a RankTable,
        }
        let w = Wrapped {
            config_hash: &hash,
            corpus_seeds: &cfg.corpus_seeds,
            table: &table,
        };
        write_atomic(&cfg.out, "ranktable.json", &to_json(&w))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct BenchRow {
    variant: String,
    name: &'static str,
    mod_secs: f64,
    add_secs: f64,
    attention_flops: f64,
    total_flops: f64,
    rel_error: f64,
}

/// Refinement-stage Mod./Add. seconds and FLOPs of one run.
fn refinement_cost(model: &VarModel, trace: &GenerationTrace) -> (f64, f64, f64, f64) {
    trace
        .records
        .iter()
        .filter(|r| model.schedule.is_refinement(r.scale))
        .fold((0.0, 0.0, 0.0, 0.0), |acc, r| {
            (
                acc.0 + r.timing.model_secs,
                acc.1 + r.timing.strategy_secs,
                acc.2 + r.flops.attention as f64,
                acc.3 + r.flops.total() as f64,
            )
        })
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let hash = cfg.hash();
    let model = cfg.build_model()?;
    let reference_stage = cfg.stage_config(&model, Strategy::Vanilla)?;
    let needs_table = cfg
        .bench
        .variants
        .iter()
        .any(|v| v.strategy().is_some_and(Strategy::uses_rank_table));
    let table = if needs_table {
        Some(load_or_build_table(cfg, &model, &nonzero_alphas(&reference_stage.alphas))?.0)
    } else {
        None
    };
    let stages = cfg
        .bench
        .variants
        .iter()
        .map(|v| v.strategy().map(|s| reference_stage.clone().with_strategy(s)))
        .collect::<Vec<_>>();
    let references = cfg
        .seeds
        .iter()
        .map(|&s| run_variant(&model, Variant::Staged(Strategy::Vanilla), Some(&reference_stage), None, s, cfg.guidance).map(|r| r.0))
        .collect::<Result<Vec<_>, _>>()?;
    let n = cfg.seeds.len() as f64;
    let mut rows = Vec::new();
    for (&variant, stage) in cfg.bench.variants.iter().zip(&stages) {
        for _ in 0..cfg.bench.warmup {
            run_variant(&model, variant, stage.as_ref(), table.as_ref(), cfg.seeds[0], cfg.guidance)?;
        }
        let (mut mods, mut adds) = (Vec::new(), Vec::new());
        let mut row = BenchRow {
            variant: variant.to_string(),
            name: variant.name(),
            mod_secs: 0.0,
            add_secs: 0.0,
            attention_flops: 0.0,
            total_flops: 0.0,
            rel_error: 0.0,
        };
        for rep in 0..cfg.bench.repeats {
            let (mut m, mut a) = (0.0, 0.0);
            for (&seed, reference) in cfg.seeds.iter().zip(&references) {
                let (f, trace) = run_variant(&model, variant, stage.as_ref(), table.as_ref(), seed, cfg.guidance)?;
                let (tm, ta, att, tot) = refinement_cost(&model, &trace);
                m += tm / n;
                a += ta / n;
                if rep == 0 {
                    row.attention_flops += att / n;
                    row.total_flops += tot / n;
                    row.rel_error += f.relative_error(reference).map_err(CliError::from_core)? / n;
                }
            }
            mods.push(m);
            adds.push(a);
        }
        row.mod_secs = median(&mods);
        row.add_secs = median(&adds);
        rows.push(row);
    }
    let name = format!("bench.{}", cfg.format.extension());
    let bytes = match cfg.format {
        Format::Csv => {
            let mut out = metadata_lines(&[
                ("config_hash", hash.clone()),
                ("seeds", join(&cfg.seeds, ",")),
                ("warmup", cfg.bench.warmup.to_string()),
                ("repeats", cfg.bench.repeats.to_string()),
                ("timing", "median over repeats of per-run refinement-stage seconds".into()),
            ]);
            out.push_str("variant,name,mod_secs,add_secs,attention_flops,total_flops,rel_error\n");
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6},{:e},{:e},{:e}",
                    r.variant, r.name, r.mod_secs, r.add_secs, r.attention_flops, r.total_flops, r.rel_error
                );
            }
            out.into_bytes()
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Report<'a> {
                config_hash: &'a str,
                seeds: &'a [u64],
                warmup: usize,
                repeats: usize,
                rows: &'a [BenchRow],
            }
            to_json(&Report {
                config_hash: &hash,
                seeds: &cfg.seeds,
                warmup: cfg.bench.warmup,
                repeats: cfg.bench.repeats,
                rows: &rows,
            })
        }
    };
    write_atomic(&cfg.out, &name, &bytes)?;
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let hash = cfg.hash();
    let model = cfg.build_model()?;
    let strategy = cfg.variant.strategy().unwrap_or(Strategy::Vanilla);
    let base = cfg.stage_config(&model, strategy)?;
    let table = if strategy.uses_rank_table() {
        Some(load_or_build_table(cfg, &model, &cfg.sweep.alphas)?.0)
    } else {
        None
    };
    let rows: Vec<SweepRow> =
        alpha_sweep(&model, &cfg.seeds, &cfg.sweep.alphas, &base, table.as_ref(), cfg.guidance).map_err(CliError::from_core)?;
    let (_, trace) = model.generate_vanilla(cfg.seeds[0], cfg.guidance).map_err(CliError::from_core)?;
    let (low, high) = frequency_evolution(&trace, DEFAULT_CUTOFF).map_err(CliError::from_core)?;
    let conv = convergence_curve(&trace).map_err(CliError::from_core)?;
    let meta = [
        ("config_hash", hash.clone()),
        ("strategy", format!("{} ({})", strategy, strategy.name())),
        ("seeds", join(&cfg.seeds, ",")),
        ("reference_rank_fractions", reference_fractions_text()),
    ];
    match cfg.format {
        Format::Csv => {
            let mut s = metadata_lines(&meta);
            s.push_str(&sweep_csv(&rows));
            write_atomic(&cfg.out, "sweep.csv", s.as_bytes())?;
            let mut c = metadata_lines(&[
                ("config_hash", hash.clone()),
                ("seed", cfg.seeds[0].to_string()),
                ("cutoff", DEFAULT_CUTOFF.to_string()),
            ]);
            c.push_str(&curves_csv(&[low, high, conv]));
            write_atomic(&cfg.out, "curves.csv", c.as_bytes())?;
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Report<'a> {
                config_hash: &'a str,
                strategy: String,
                reference_rank_fractions: String,
                rows: &'a [SweepRow],
                curves: [&'a stagevar_core::analysis::ScaleCurve; 3],
            }
            let r = Report {
                config_hash: &hash,
                strategy: strategy.to_string(),
                reference_rank_fractions: reference_fractions_text(),
                rows: &rows,
                curves: [&low, &high, &conv],
            };
            write_atomic(&cfg.out, "sweep.json", &to_json(&r))?;
        }
    }
    Ok(())
}

/// Used by tests: the files a default single-seed `generate` writes.
pub fn generate_artifacts(dir: &Path, seed: u64, format: Format) -> Vec<std::path::PathBuf> {
    vec![
        dir.join(format!("image_seed{seed}.ppm")),
        dir.join(format!("trace_seed{seed}.{}", format.extension())),
        dir.join("manifest.json"),
    ]
}

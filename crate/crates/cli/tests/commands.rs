use std::fs;
use std::path::{Path, PathBuf};

use stagevar_cli::config::{Format, RunConfig};
use stagevar_cli::{commands, run, CliError};
use stagevar_core::stageaccel::RankTable;

/// Six scales up to 12x12, refinement over the last two.
const SMALL: &str = r#"
seeds = [3]
corpus_seeds = [100, 101, 102]
[model]
sides = [1, 2, 4, 6, 8, 12]
refinement_start = 4
channels = 8
heads = 2
blocks = 2
vocab = 32
weight_seed = 5
codebook_seed = 6
residual_decay = 0.7
[bench]
warmup = 0
repeats = 1
"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{extra}\n{SMALL}")).unwrap();
    p
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("stagevar").chain(args.iter().copied()))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn generate_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let code = cli(&["generate", "--config", path_str(&cfg), "--variant", "vanilla", "--seed", "7", "--out", path_str(out)]);
        assert_eq!(code, 0);
    }
    let (fa, fb) = (files_in(&a), files_in(&b));
    assert_eq!(fa.len(), 3);
    assert_eq!(fa, fb);
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["image_seed7.ppm", "manifest.json", "trace_seed7.csv"]);
}

#[test]
fn staged_run_records_strategy_and_skips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("o");
    let code = cli(&["generate", "--config", path_str(&cfg), "--variant", "6", "--alpha", "0.96,0", "--out", path_str(&out)]);
    assert_eq!(code, 0);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["strategy"], 6);
    assert_eq!(m["strategy_name"], "rp-rtr");
    assert_eq!(m["skipped"], serde_json::json!([5]));
    assert_eq!(m["seeds"], serde_json::json!([3]));
    assert_eq!(m["config"]["stage"]["alphas"], serde_json::json!([0.96, 0.0]));
    assert!(m["rank_table"]["corpus"].is_object());
    let hash = m["config_hash"].as_str().unwrap();
    let ppm = fs::read(out.join("image_seed3.ppm")).unwrap();
    assert!(ppm.starts_with(format!("P6\n# config_hash {hash}\n12 12\n255\n").as_bytes()));
    let trace = fs::read_to_string(out.join("trace_seed3.csv")).unwrap();
    assert!(trace.contains(&format!("# config_hash: {hash}")));
    assert!(trace.contains("# skipped: 5"));
    // Scales 0..=4 executed; scale 5 skipped.
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 1 + 5);
}

#[test]
fn json_trace_format() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "format = \"json\"");
    let out = tmp.path().join("o");
    assert_eq!(cli(&["generate", "--config", path_str(&cfg), "--out", path_str(&out)]), 0);
    let t: serde_json::Value = serde_json::from_slice(&fs::read(out.join("trace_seed3.json")).unwrap()).unwrap();
    assert_eq!(t["scales"].as_array().unwrap().len(), 6);
    assert_eq!(t["variant"], "vanilla");
    assert!(t["scales"][0].get("model_secs").is_none());
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let bad_key = write_config(tmp.path(), "colour = 1");
    assert_eq!(cli(&["generate", "--config", path_str(&bad_key), "--out", path_str(&out)]), 2);
    let cfg = write_config(tmp.path(), "");
    // Wrong alpha count for two refinement scales.
    assert_eq!(cli(&["generate", "--config", path_str(&cfg), "--variant", "6", "--alpha", "0.9", "--out", path_str(&out)]), 2);
    assert_eq!(cli(&["generate", "--config", path_str(&cfg), "--alpha", "0.9,abc", "--out", path_str(&out)]), 2);
    assert_eq!(cli(&["generate", "--config", path_str(&cfg), "--variant", "9"]), 2);
    assert_eq!(cli(&["generate", "--config", path_str(&tmp.path().join("missing.toml"))]), 2);
    assert_eq!(cli(&["frobnicate"]), 2);
    assert!(!out.exists(), "nothing is written when validation fails");
}

#[test]
fn numeric_errors_map_to_three() {
    let e = CliError::from_core(stagevar_core::Error::NonFinite("x"));
    assert_eq!(e.exit_code(), 3);
    assert_eq!(CliError::from_core(stagevar_core::Error::Config("x".into())).exit_code(), 2);
    assert_eq!(CliError::Io("x".into()).exit_code(), 1);
}

#[test]
fn rank_stats_round_trips_and_feeds_generate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("rs");
    let code = cli(&["rank-stats", "--config", path_str(&cfg), "--alpha", "0.96,0.9", "--format", "json", "--out", path_str(&out)]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(out.join("ranktable.txt")).unwrap();
    assert_eq!(text.lines().next(), Some("stagevar-ranktable v1"));
    assert!(text.contains("# config_hash: "));
    let table = RankTable::from_text(&text).unwrap();
    assert!(table.has_alpha(0.96) && table.has_alpha(0.9));
    assert_eq!(table.blocks, 2);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("ranktable.json")).unwrap()).unwrap();
    assert_eq!(json["corpus_seeds"], serde_json::json!([100, 101, 102]));

    // Use the written table; an alpha it lacks is a config error.
    let table_path = out.join("ranktable.txt");
    let with_table = write_config(tmp.path(), &format!("rank_table = {:?}", path_str(&table_path)));
    let gen = tmp.path().join("g");
    assert_eq!(cli(&["generate", "--config", path_str(&with_table), "--variant", "4", "--alpha", "0.9,0.96", "--out", path_str(&gen)]), 0);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(gen.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["rank_table"]["file"], path_str(&table_path));
    assert_eq!(cli(&["generate", "--config", path_str(&with_table), "--variant", "4", "--alpha", "0.5,0.96", "--out", path_str(&gen)]), 2);
}

#[test]
fn bench_rows_cover_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("b");
    assert_eq!(cli(&["bench", "--config", path_str(&cfg), "--out", path_str(&out)]), 0);
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "variant,name,mod_secs,add_secs,attention_flops,total_flops,rel_error");
    assert_eq!(rows.len(), 1 + 6);
    let first: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(first[0], "1");
    assert_eq!(first[6].parse::<f64>().unwrap(), 0.0);
    let last: Vec<&str> = rows[6].split(',').collect();
    assert_eq!(last[1], "rp-rtr");
    assert!(last[4].parse::<f64>().unwrap() < first[4].parse::<f64>().unwrap());
}

#[test]
fn sweep_writes_rows_and_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "variant = \"2\"");
    let out = tmp.path().join("s");
    assert_eq!(cli(&["sweep", "--config", path_str(&cfg), "--alpha", "1,0.9,0.5", "--out", path_str(&out)]), 0);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.contains("# reference_rank_fractions: 0.999=0.595"));
    let rows: Vec<Vec<String>> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0][3].parse::<f64>().unwrap() <= 1e-8);
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.contains("metric,scale,value\n"));
    assert!(curves.contains("distance_to_final,5,0e0"));
}

#[test]
fn default_config_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(cli(&["generate", "--out", path_str(&out)]), 0);
    assert_eq!(files_in(&out).len(), 3);
    for p in commands::generate_artifacts(&out, RunConfig::default().seeds[0], Format::Csv) {
        assert!(p.is_file(), "{}", p.display());
    }
}

#[test]
fn binary_reports_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "nope = true");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_stagevar"))
        .args(["generate", "--config", path_str(&bad)])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("configuration error"));
}

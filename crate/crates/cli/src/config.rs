//! Run configuration: one TOML file, every field optional, unknown keys
//! rejected. Command-line flags are applied on top of the file.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stagevar_core::stageaccel::{ProjectionSharing, StageConfig, Strategy};
use stagevar_core::varengine::{ModelSpec, VarModel, DEFAULT_GUIDANCE};

use crate::CliError;

/// `vanilla` is plain guided generation; `1`–`6` run the accelerated loop
/// with that strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Vanilla,
    Staged(Strategy),
}

impl Variant {
    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Variant::Vanilla => None,
            Variant::Staged(s) => Some(s),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Staged(s) => s.name(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Vanilla => f.write_str("vanilla"),
            Variant::Staged(s) => write!(f, "{s}"),
        }
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim() == "vanilla" {
            return Ok(Variant::Vanilla);
        }
        s.parse::<Strategy>()
            .map(Variant::Staged)
            .map_err(|_| format!("variant must be vanilla or 1-6, got {s:?}"))
    }
}

impl TryFrom<String> for Variant {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("format must be csv or json, got {other:?}")),
        }
    }
}

/// Refinement-stage settings; the strategy comes from `variant`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    /// One per refinement scale; defaults to the first at 0.96, rest skipped.
    pub alphas: Option<Vec<f64>>,
    pub cfg_zero_in_refinement: bool,
    pub projection_sharing: ProjectionSharing,
    pub seed: u64,
}

impl Default for StageSection {
    fn default() -> Self {
        Self {
            alphas: None,
            cfg_zero_in_refinement: true,
            projection_sharing: ProjectionSharing::PerScale,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub variants: Vec<Variant>,
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            variants: Strategy::ALL.iter().map(|&s| Variant::Staged(s)).collect(),
            warmup: 1,
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            alphas: vec![1.0, 0.999, 0.99, 0.98, 0.97, 0.96, 0.95],
        }
    }
}

/// Everything a command needs. Serialized form is what the config hash
/// covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Prompts used to build a rank table when none is given.
    pub corpus_seeds: Vec<u64>,
    /// Thresholds of the rank table built by `rank-stats`.
    pub rank_alphas: Vec<f64>,
    /// Existing rank-table file for strategies 4–6.
    pub rank_table: Option<PathBuf>,
    pub guidance: f64,
    /// Not serialized: where artifacts go does not change their content.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub format: Format,
    pub model: ModelSpec,
    pub stage: StageSection,
    pub bench: BenchSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Vanilla,
            seeds: vec![0],
            corpus_seeds: (1000..1004).collect(),
            rank_alphas: vec![0.96],
            rank_table: None,
            guidance: DEFAULT_GUIDANCE,
            out: PathBuf::from("stagevar-out"),
            format: Format::Csv,
            model: ModelSpec::desk(),
            stage: StageSection::default(),
            bench: BenchSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Flag values; `None` keeps the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub alphas: Option<Vec<f64>>,
    pub format: Option<Format>,
}

/// Which list `--alpha` replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaTarget {
    Stage,
    RankTable,
    Sweep,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn apply(&mut self, o: &Overrides, target: AlphaTarget) {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(v) = o.variant {
            self.variant = v;
        }
        if let Some(f) = o.format {
            self.format = f;
        }
        if let Some(a) = &o.alphas {
            match target {
                AlphaTarget::Stage => self.stage.alphas = Some(a.clone()),
                AlphaTarget::RankTable => self.rank_alphas = a.clone(),
                AlphaTarget::Sweep => self.sweep.alphas = a.clone(),
            }
        }
    }

    pub fn build_model(&self) -> Result<VarModel, CliError> {
        self.model.build().map_err(CliError::from_core)
    }

    /// Stage configuration for `strategy`, validated against the schedule.
    pub fn stage_config(&self, model: &VarModel, strategy: Strategy) -> Result<StageConfig, CliError> {
        let default = StageConfig::stagevar_default(&model.schedule);
        let cfg = StageConfig {
            alphas: self.stage.alphas.clone().unwrap_or(default.alphas),
            strategy,
            cfg_zero_in_refinement: self.stage.cfg_zero_in_refinement,
            projection_sharing: self.stage.projection_sharing,
            seed: self.stage.seed,
        };
        cfg.validate(&model.schedule).map_err(CliError::from_core)?;
        Ok(cfg)
    }

    /// Checks that do not need the model.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if !self.guidance.is_finite() {
            return bad(format!("guidance must be finite, got {}", self.guidance));
        }
        if self.bench.repeats == 0 {
            return bad("bench.repeats must be at least 1".into());
        }
        if self.bench.variants.is_empty() {
            return bad("bench.variants must not be empty".into());
        }
        if self.sweep.alphas.is_empty() || self.sweep.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return bad("sweep.alphas must be a nonempty list in (0, 1]".into());
        }
        if self.rank_alphas.is_empty() || self.rank_alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return bad("rank_alphas must be a nonempty list in (0, 1]".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Parses `0.96,0,0`.
pub fn parse_alpha_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad alpha {t:?} in {s:?}"))
        })
        .collect()
}

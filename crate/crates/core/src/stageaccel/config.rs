use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::varengine::ScaleSchedule;

/// Threshold used at the first refinement scale by the default configuration.
pub const DEFAULT_ALPHA: f64 = 0.96;

/// How a refinement scale's block stack is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    /// ① Every block on the full `M x d` input.
    Vanilla,
    /// ② Every block on the rank-`r` SVD truncation of its input, still `M x d`.
    LowRankFull,
    /// ③ Full SVD, `r` from the energy threshold, blocks on `diag(σ_r) Vt_r`.
    SvdRdim,
    /// ④ As ③ with `r` from the rank table and a rank-`r` decomposition.
    SvdRdimPredetermined,
    /// ⑤ Random projection, output recovered by least squares.
    RpLls,
    /// ⑥ Random projection, output rebuilt by token restoration.
    RpRtr,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Vanilla,
        Strategy::LowRankFull,
        Strategy::SvdRdim,
        Strategy::SvdRdimPredetermined,
        Strategy::RpLls,
        Strategy::RpRtr,
    ];

    /// 1-based number, as in the ①–⑥ labels.
    pub fn number(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap() + 1
    }

    pub fn from_number(n: usize) -> Result<Self> {
        n.checked_sub(1)
            .and_then(|i| Self::ALL.get(i).copied())
            .ok_or_else(|| Error::Config(format!("strategy number {n} outside 1..=6")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::LowRankFull => "low-rank-full",
            Strategy::SvdRdim => "svd-rdim",
            Strategy::SvdRdimPredetermined => "svd-rdim-predetermined",
            Strategy::RpLls => "rp-lls",
            Strategy::RpRtr => "rp-rtr",
        }
    }

    /// Blocks run on `r` rows instead of `M`.
    pub fn is_reduced(self) -> bool {
        !matches!(self, Strategy::Vanilla | Strategy::LowRankFull)
    }

    /// `r` comes from the rank table rather than from an SVD of the input.
    pub fn uses_rank_table(self) -> bool {
        matches!(self, Strategy::SvdRdimPredetermined | Strategy::RpLls | Strategy::RpRtr)
    }

    /// Reads the previous scale's output cache.
    pub fn uses_cache(self) -> bool {
        self.is_reduced()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts the number (`"6"`) or the name (`"rp-rtr"`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(n) = s.parse::<usize>() {
            return Self::from_number(n);
        }
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

/// Whether the random projection and the sampled rows are drawn once per
/// scale and shared by every block, or drawn afresh for each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionSharing {
    PerBlock,
    #[default]
    PerScale,
}

/// Settings of the accelerated loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// One threshold per refinement scale; `0` skips the scale.
    pub alphas: Vec<f64>,
    pub strategy: Strategy,
    /// Refinement scales run the unconditional pass only.
    pub cfg_zero_in_refinement: bool,
    pub projection_sharing: ProjectionSharing,
    pub seed: u64,
}

impl StageConfig {
    /// `DEFAULT_ALPHA` at the first refinement scale, every later one skipped.
    pub fn stagevar_default(schedule: &ScaleSchedule) -> Self {
        let mut alphas = vec![0.0; schedule.num_refinement()];
        if let Some(first) = alphas.first_mut() {
            *first = DEFAULT_ALPHA;
        }
        Self {
            alphas,
            strategy: Strategy::RpRtr,
            cfg_zero_in_refinement: true,
            projection_sharing: ProjectionSharing::PerScale,
            seed: 0,
        }
    }

    /// The same threshold at every refinement scale.
    pub fn uniform(schedule: &ScaleSchedule, alpha: f64, strategy: Strategy) -> Self {
        Self {
            alphas: vec![alpha; schedule.num_refinement()],
            strategy,
            ..Self::stagevar_default(schedule)
        }
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn validate(&self, schedule: &ScaleSchedule) -> Result<()> {
        if self.alphas.len() != schedule.num_refinement() {
            return Err(Error::Config(format!(
                "{} alphas for {} refinement scales",
                self.alphas.len(),
                schedule.num_refinement()
            )));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
        }
        Ok(())
    }

    /// Threshold of scale `k`, or `None` outside the refinement stage.
    pub fn alpha_for(&self, schedule: &ScaleSchedule, k: usize) -> Option<f64> {
        if !schedule.is_refinement(k) {
            return None;
        }
        self.alphas.get(k - schedule.refinement_start()).copied()
    }

    /// Refinement scales with `α = 0`.
    pub fn skipped(&self, schedule: &ScaleSchedule) -> Vec<usize> {
        schedule
            .refinement_scales()
            .filter(|&k| self.alpha_for(schedule, k) == Some(0.0))
            .collect()
    }
}

//! Stage-aware acceleration of the refinement scales.
//!
//! Scales before the schedule's refinement start run the vanilla guided
//! step. From there on each scale either is skipped (`α = 0`) or runs one
//! of six strategies, applied at every block input of the stack:
//!
//! | | blocks see | `r` from | output rebuilt by |
//! |---|---|---|---|
//! | ① | `X` (`M x d`) | – | – |
//! | ② | `X_r` (`M x d`) | energy threshold | – |
//! | ③ | `diag(σ_r) Vt_r` | energy threshold | `(U_r + U^c_r) y` |
//! | ④ | `diag(σ_r) Vt_r` via rank-`r` decomposition | rank table | `(U_r + U^c_r) y` |
//! | ⑤ | `Qᵀ X` | rank table | `(Ŵ + W^c) y`, two least-squares fits |
//! | ⑥ | `Qᵀ X` | rank table | rows at sampled indices, cache elsewhere |
//!
//! `U^c` and `W^c` come from the previous executed scale's block-stack
//! output, upsampled to the current grid (the output cache). Refinement
//! scales run only the unconditional pass unless configured otherwise.
//!
//! Time inside the predictor (input preparation and block calls) is the
//! Mod. column; the rest of the refinement forward is the Add. column.

mod bench;
mod config;
mod ranktable;
mod refine;
mod restore;

pub use bench::{median, time_refinement, RefinementTiming};
pub use config::{ProjectionSharing, StageConfig, Strategy, DEFAULT_ALPHA};
pub use ranktable::{build_rank_table, RankEntry, RankTable, RankTableBuilder, ScaleTokens, RANK_TABLE_HEADER};
pub use refine::{generate_stagevar, refinement_forward, Accelerator, RefinementOutput};
pub use restore::{restore_rows, restore_tokens, OutputCache};

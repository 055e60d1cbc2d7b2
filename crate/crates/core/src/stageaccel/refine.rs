use std::time::Instant;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::matgrid::{downsample, frobenius, upsample, FeatureMap};
use crate::numcore::{
    draw_rows, gaussian_matrix, mix_seed, rank_r_svd, sample_rows, select_rank, solve_lls, svd, tail_norm, truncate,
    ProjectionMatrix,
};
use crate::varengine::{
    cfg_combine, Condition, FlopCount, GenerationTrace, Predictor, Residual, ScaleRecord, ScaleTiming, TruncationCheck,
    VarModel,
};

use super::config::{ProjectionSharing, StageConfig, Strategy};
use super::ranktable::RankTable;
use super::restore::{restore_rows, OutputCache};

const PROJECTION_TAG: u64 = 0x51;
const SAMPLING_TAG: u64 = 0x1d;

/// One refinement scale's block-stack output with its accounting.
#[derive(Debug, Clone)]
pub struct RefinementOutput {
    /// `F_k^o` at the scale's grid.
    pub output: FeatureMap,
    pub flops: FlopCount,
    pub forwards: usize,
    /// Rank used at each block of the unconditional pass.
    pub block_ranks: Vec<usize>,
    pub truncation: Vec<TruncationCheck>,
    /// Time inside `prepare_input` and block calls.
    pub model_secs: f64,
    /// Everything else spent in the refinement forward.
    pub strategy_secs: f64,
}

/// Block calls with their FLOPs and wall time.
#[derive(Default)]
struct Meter {
    flops: FlopCount,
    secs: f64,
}

impl Meter {
    fn block(&mut self, p: &Predictor, b: usize, x: &Array2<f64>) -> Result<Array2<f64>> {
        let t = Instant::now();
        let y = p.block_forward(b, x, &mut self.flops);
        self.secs += t.elapsed().as_secs_f64();
        y
    }
}

/// Per-scale quantities shared by every block and both guidance passes.
struct ScaleShared {
    /// Cache upsampled to the scale's grid.
    filler: Option<Array2<f64>>,
    /// Left singular vectors of `filler` (③, ④).
    cache_basis: Option<Array2<f64>>,
    /// Unit-variance normals, `M x r_max`, column-major generation order.
    normals: Option<Array2<f64>>,
    /// Row draws on `F̃_{k−1}` in draw order.
    draws: Option<Vec<usize>>,
    scale_seed: u64,
}

impl ScaleShared {
    fn projection(&self, sharing: ProjectionSharing, b: usize, r: usize, m: usize) -> Result<Array2<f64>> {
        let seed = mix_seed(self.scale_seed, PROJECTION_TAG);
        match (sharing, &self.normals) {
            // Same values as ProjectionMatrix::new(m, r, seed).
            (ProjectionSharing::PerScale, Some(z)) => Ok(&z.slice(s![.., ..r]) * (1.0 / (r as f64).sqrt())),
            _ => Ok(ProjectionMatrix::new(m, r, mix_seed(seed, b as u64 + 1))?.q),
        }
    }

    fn indices(&self, sharing: ProjectionSharing, b: usize, r: usize, x: &Array2<f64>) -> Result<Vec<usize>> {
        let seed = mix_seed(self.scale_seed, SAMPLING_TAG);
        match (sharing, &self.draws) {
            (ProjectionSharing::PerScale, Some(draws)) => {
                let mut head = draws[..r].to_vec();
                head.sort_unstable();
                Ok(head)
            }
            _ => Ok(sample_rows(x, r, mix_seed(seed, b as u64 + 1))?.indices),
        }
    }

    fn filler(&self) -> &Array2<f64> {
        self.filler.as_ref().expect("cache-based strategies prepare the filler")
    }

    fn basis(&self) -> &Array2<f64> {
        self.cache_basis.as_ref().expect("svd strategies prepare the cache basis")
    }
}

/// A model, a stage configuration and (for ④–⑥) a rank table.
#[derive(Debug, Clone, Copy)]
pub struct Accelerator<'a> {
    pub model: &'a VarModel,
    pub config: &'a StageConfig,
    pub table: Option<&'a RankTable>,
}

impl<'a> Accelerator<'a> {
    pub fn new(model: &'a VarModel, config: &'a StageConfig, table: Option<&'a RankTable>) -> Result<Self> {
        config.validate(&model.schedule)?;
        if config.strategy.uses_rank_table() && table.is_none() {
            return Err(Error::Config(format!(
                "strategy {} ({}) needs a rank table",
                config.strategy,
                config.strategy.name()
            )));
        }
        Ok(Self { model, config, table })
    }

    fn table_ranks(&self, k: usize, alpha: f64, m: usize) -> Result<Vec<usize>> {
        if !self.config.strategy.uses_rank_table() {
            return Ok(Vec::new());
        }
        let table = self.table.expect("checked in new");
        if let Some(tm) = table.tokens(k) {
            if tm != m {
                return Err(Error::DimensionMismatch(format!(
                    "rank table has {tm} tokens at scale {k}, schedule has {m}"
                )));
            }
        }
        (0..self.model.predictor.num_blocks())
            .map(|b| table.rank_for(b, k, alpha))
            .collect()
    }

    /// `F_k^o` of refinement scale `k` from `F̃_{k−1}` under the configured
    /// strategy, applied at every block input.
    pub fn refinement_forward(
        &self,
        k: usize,
        f_tilde_prev: &FeatureMap,
        cache: Option<&OutputCache>,
        cond: &Condition,
        g: f64,
    ) -> Result<RefinementOutput> {
        let t_start = Instant::now();
        let sched = &self.model.schedule;
        let strategy = self.config.strategy;
        let alpha = self
            .config
            .alpha_for(sched, k)
            .ok_or_else(|| Error::OutOfRange(format!("scale {k} is not a refinement scale")))?;
        if alpha == 0.0 {
            return Err(Error::OutOfRange(format!("scale {k} has alpha 0 and is skipped")));
        }
        let grid = sched.grid(k);
        if f_tilde_prev.grid() != grid {
            return Err(Error::DimensionMismatch(format!(
                "scale {k} input grid {} vs {grid}",
                f_tilde_prev.grid()
            )));
        }
        let m = grid.tokens();
        let ranks = self.table_ranks(k, alpha, m)?;

        let mut shared = ScaleShared {
            filler: None,
            cache_basis: None,
            normals: None,
            draws: None,
            scale_seed: mix_seed(self.config.seed, k as u64),
        };
        if strategy.uses_cache() {
            let cache = cache.ok_or(Error::MissingCache(k))?;
            if cache.scale >= k || cache.output.grid() != sched.grid(cache.scale) {
                return Err(Error::DimensionMismatch(format!(
                    "cache from scale {} with grid {} cannot feed scale {k}",
                    cache.scale,
                    cache.output.grid()
                )));
            }
            shared.filler = Some(cache.upsampled(grid)?.into_data());
        }
        let r_max = ranks.iter().copied().max().unwrap_or(0);
        match strategy {
            Strategy::SvdRdim => shared.cache_basis = Some(svd(shared.filler())?.u),
            Strategy::SvdRdimPredetermined => shared.cache_basis = Some(rank_r_svd(shared.filler(), r_max)?.u),
            Strategy::RpLls | Strategy::RpRtr if self.config.projection_sharing == ProjectionSharing::PerScale => {
                shared.normals = Some(gaussian_matrix(m, r_max, mix_seed(shared.scale_seed, PROJECTION_TAG), 1.0));
                if strategy == Strategy::RpRtr {
                    shared.draws = Some(draw_rows(f_tilde_prev.data(), r_max, mix_seed(shared.scale_seed, SAMPLING_TAG))?);
                }
            }
            _ => {}
        }

        let null = Condition::null(self.model.dim());
        let passes: Vec<&Condition> = if self.config.cfg_zero_in_refinement {
            vec![&null]
        } else {
            vec![cond, &null]
        };
        let mut meter = Meter::default();
        let mut outputs = Vec::with_capacity(passes.len());
        let mut block_ranks = Vec::new();
        let mut truncation = Vec::new();
        for c in &passes {
            block_ranks.clear();
            truncation.clear();
            let t = Instant::now();
            let x0 = self.model.predictor.prepare_input(f_tilde_prev, c)?;
            meter.secs += t.elapsed().as_secs_f64();
            let x = self.stack(x0, alpha, &ranks, &shared, &mut meter, &mut block_ranks, &mut truncation)?;
            outputs.push(FeatureMap::new(x, grid)?);
        }
        let output = match outputs.len() {
            1 => outputs.pop().unwrap(),
            _ => cfg_combine(&outputs[0], &outputs[1], g)?,
        };
        let total = t_start.elapsed().as_secs_f64();
        Ok(RefinementOutput {
            output,
            flops: meter.flops,
            forwards: passes.len(),
            block_ranks,
            truncation,
            model_secs: meter.secs,
            strategy_secs: (total - meter.secs).max(0.0),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn stack(
        &self,
        mut x: Array2<f64>,
        alpha: f64,
        ranks: &[usize],
        shared: &ScaleShared,
        meter: &mut Meter,
        block_ranks: &mut Vec<usize>,
        truncation: &mut Vec<TruncationCheck>,
    ) -> Result<Array2<f64>> {
        let p = &self.model.predictor;
        let sharing = self.config.projection_sharing;
        let m = x.nrows();
        for b in 0..p.num_blocks() {
            x = match self.config.strategy {
                Strategy::Vanilla => meter.block(p, b, &x)?,
                Strategy::LowRankFull => {
                    let f = svd(&x)?;
                    let sigma = f.sigma.as_slice().expect("contiguous");
                    let r = select_rank(sigma, alpha)?;
                    let xr = truncate(&f, r)?;
                    truncation.push(TruncationCheck {
                        block: b,
                        rank: r,
                        error: frobenius(&(&x - &xr).view()),
                        tail: tail_norm(sigma, r),
                    });
                    block_ranks.push(r);
                    meter.block(p, b, &xr)?
                }
                Strategy::SvdRdim => {
                    let f = svd(&x)?;
                    let r = select_rank(f.sigma.as_slice().expect("contiguous"), alpha)?;
                    block_ranks.push(r);
                    let y = meter.block(p, b, &f.row_space_coordinates(r)?)?;
                    let basis = &f.u.slice(s![.., ..r]) + &shared.basis().slice(s![.., ..r]);
                    basis.dot(&y)
                }
                Strategy::SvdRdimPredetermined => {
                    let r = ranks[b];
                    block_ranks.push(r);
                    let f = rank_r_svd(&x, r)?;
                    let y = meter.block(p, b, &f.row_space_coordinates(r)?)?;
                    let basis = &f.u + &shared.basis().slice(s![.., ..r]);
                    basis.dot(&y)
                }
                Strategy::RpLls => {
                    let r = ranks[b];
                    block_ranks.push(r);
                    let q = shared.projection(sharing, b, r, m)?;
                    let f_hat = q.t().dot(&x);
                    let w_hat = solve_lls(&f_hat, &x)?;
                    let y = meter.block(p, b, &f_hat)?;
                    let w_cache = solve_lls(&y, shared.filler())?;
                    (w_hat + w_cache).dot(&y)
                }
                Strategy::RpRtr => {
                    let r = ranks[b];
                    block_ranks.push(r);
                    let q = shared.projection(sharing, b, r, m)?;
                    let y = meter.block(p, b, &q.t().dot(&x))?;
                    let idx = shared.indices(sharing, b, r, &x)?;
                    restore_rows(&y, &idx, shared.filler())?
                }
            };
        }
        Ok(x)
    }

    /// The full loop: vanilla scales before the refinement stage, the
    /// configured strategy after it. Refinement scales with `α = 0` are
    /// skipped, leaving the running feature and the cache untouched.
    pub fn generate(&self, prompt_seed: u64, g: f64) -> Result<(FeatureMap, GenerationTrace)> {
        let model = self.model;
        let sched = &model.schedule;
        let cond = model.condition(prompt_seed);
        let (mut f, mut input) = model.initial_state();
        let mut cache: Option<OutputCache> = None;
        let mut trace = GenerationTrace::default();
        let plain_refinement = self.config.strategy == Strategy::Vanilla && !self.config.cfg_zero_in_refinement;
        for k in 0..sched.len() {
            let alpha = self.config.alpha_for(sched, k);
            if alpha == Some(0.0) {
                trace.skipped.push(k);
                if k + 1 < sched.len() {
                    input = downsample(&f, sched.grid(k + 1))?;
                }
                continue;
            }
            let t0 = Instant::now();
            let (out, residual) = if alpha.is_none() || plain_refinement {
                let step = model.vanilla_step(k, &f, &input, &cond, g)?;
                let out = RefinementOutput {
                    output: step.output,
                    flops: step.flops,
                    forwards: step.forwards,
                    block_ranks: Vec::new(),
                    truncation: Vec::new(),
                    model_secs: step.model_secs,
                    strategy_secs: 0.0,
                };
                let residual = Residual {
                    tokens: step.tokens,
                    embedded: step.embedded,
                    feature: step.feature,
                    next_input: step.next_input,
                };
                (out, residual)
            } else {
                let out = self.refinement_forward(k, &input, cache.as_ref(), &cond, g)?;
                let residual = model.apply_residual(k, &f, &out.output)?;
                (out, residual)
            };
            let total = t0.elapsed().as_secs_f64();
            trace.records.push(ScaleRecord {
                scale: k,
                grid: sched.grid(k),
                tokens: residual.tokens,
                feature: residual.feature.clone(),
                output: out.output.clone(),
                flops: out.flops,
                forwards: out.forwards,
                block_ranks: out.block_ranks,
                truncation: out.truncation,
                timing: ScaleTiming {
                    model_secs: out.model_secs,
                    strategy_secs: out.strategy_secs,
                    other_secs: (total - out.model_secs - out.strategy_secs).max(0.0),
                },
            });
            cache = Some(OutputCache::new(out.output, k));
            f = residual.feature;
            if let Some(next) = residual.next_input {
                input = next;
            }
        }
        // Skipped trailing scales leave F at the last executed scale; it
        // already lives at the full grid, so this is the identity there.
        let image = upsample(&f, sched.full_grid())?;
        Ok((image, trace))
    }
}

/// [`Accelerator::refinement_forward`] as a free function.
#[allow(clippy::too_many_arguments)]
pub fn refinement_forward(
    model: &VarModel,
    config: &StageConfig,
    table: Option<&RankTable>,
    k: usize,
    f_tilde_prev: &FeatureMap,
    cache: Option<&OutputCache>,
    cond: &Condition,
    g: f64,
) -> Result<RefinementOutput> {
    Accelerator::new(model, config, table)?.refinement_forward(k, f_tilde_prev, cache, cond, g)
}

/// [`Accelerator::generate`] as a free function.
pub fn generate_stagevar(
    model: &VarModel,
    config: &StageConfig,
    table: Option<&RankTable>,
    prompt_seed: u64,
    g: f64,
) -> Result<(FeatureMap, GenerationTrace)> {
    Accelerator::new(model, config, table)?.generate(prompt_seed, g)
}

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matgrid::{downsample, upsample, FeatureMap};

use super::predictor::{cfg_combine, Condition, FlopCount, Predictor, PredictorConfig};
use super::quantizer::{quantize, residual_gain, Codebook};
use super::schedule::{ScaleSchedule, DESK_REFINEMENT_START, DESK_SIDES};
use super::trace::{GenerationTrace, ScaleRecord, ScaleTiming};

/// Default guidance scale for establishment scales.
pub const DEFAULT_GUIDANCE: f64 = 2.0;

/// Serializable description of a toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub sides: Vec<usize>,
    pub refinement_start: usize,
    pub channels: usize,
    pub heads: usize,
    pub blocks: usize,
    pub vocab: usize,
    pub weight_seed: u64,
    pub codebook_seed: u64,
    /// Scale `k` adds its codewords with gain `residual_decay^k`.
    pub residual_decay: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelSpec {
    /// Nine square scales up to 64x64, refinement from the 40-side scale,
    /// 32 channels: small enough to generate in seconds.
    pub fn desk() -> Self {
        Self {
            sides: DESK_SIDES.to_vec(),
            refinement_start: DESK_REFINEMENT_START,
            channels: 32,
            heads: 1,
            blocks: 8,
            vocab: 512,
            weight_seed: 1,
            codebook_seed: 2,
            residual_decay: 0.7,
        }
    }

    /// Same schedule at 256 channels, the width used for latency benches.
    pub fn desk_bench() -> Self {
        Self {
            channels: 256,
            heads: 2,
            ..Self::desk()
        }
    }

    pub fn build(&self) -> Result<VarModel> {
        if !(self.residual_decay > 0.0 && self.residual_decay.is_finite()) {
            return Err(Error::Config(format!(
                "residual_decay must be positive, got {}",
                self.residual_decay
            )));
        }
        let schedule = ScaleSchedule::from_sides(&self.sides, self.refinement_start)?;
        let codebook = Codebook::random(self.vocab, self.channels, self.codebook_seed)?;
        let predictor = Predictor::new(PredictorConfig {
            num_blocks: self.blocks,
            d: self.channels,
            heads: self.heads,
            seed: self.weight_seed,
            flop_counter_enabled: true,
        })?;
        VarModel::new(schedule, codebook, predictor, self.residual_decay)
    }
}

/// Schedule, codebook and predictor bundled for generation.
#[derive(Debug, Clone)]
pub struct VarModel {
    pub schedule: ScaleSchedule,
    pub codebook: Codebook,
    pub predictor: Predictor,
    pub residual_decay: f64,
}

/// Result of one scale of the generation loop.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `F_k` at the full grid.
    pub feature: FeatureMap,
    /// `F_k^o` at the scale grid.
    pub output: FeatureMap,
    pub tokens: Vec<usize>,
    /// Gain-scaled codewords of `tokens` at the scale grid.
    pub embedded: FeatureMap,
    /// `F̃_k`, the next scale's input; `None` after the last scale.
    pub next_input: Option<FeatureMap>,
    pub flops: FlopCount,
    pub forwards: usize,
    pub model_secs: f64,
}

/// State of a vanilla run just before a given scale.
#[derive(Debug, Clone)]
pub struct VanillaPrefix {
    /// Running feature after the last completed scale.
    pub feature: FeatureMap,
    /// Input of the next scale.
    pub input: FeatureMap,
    /// Block-stack output of the last completed scale, if any.
    pub last_output: Option<FeatureMap>,
}

/// Quantized residual, updated running feature and next input.
#[derive(Debug, Clone)]
pub struct Residual {
    pub tokens: Vec<usize>,
    pub embedded: FeatureMap,
    pub feature: FeatureMap,
    pub next_input: Option<FeatureMap>,
}

impl VarModel {
    pub fn new(schedule: ScaleSchedule, codebook: Codebook, predictor: Predictor, residual_decay: f64) -> Result<Self> {
        if codebook.dim() != predictor.dim() {
            return Err(Error::Config(format!(
                "codebook width {} vs predictor width {}",
                codebook.dim(),
                predictor.dim()
            )));
        }
        Ok(Self {
            schedule,
            codebook,
            predictor,
            residual_decay,
        })
    }

    pub fn dim(&self) -> usize {
        self.predictor.dim()
    }

    pub fn condition(&self, prompt_seed: u64) -> Condition {
        Condition::from_prompt(prompt_seed, self.dim())
    }

    /// `F_k^o` with guidance: one unconditional pass when `g == 0`, otherwise
    /// a conditional and an unconditional pass blended by [`cfg_combine`].
    pub fn guided_forward(&self, input: &FeatureMap, cond: &Condition, g: f64) -> Result<(FeatureMap, FlopCount, usize)> {
        self.guided_forward_observed(input, cond, g, &mut |_, _| {})
    }

    /// As [`VarModel::guided_forward`]; `observer` sees the block inputs of
    /// the unconditional pass.
    pub fn guided_forward_observed(
        &self,
        input: &FeatureMap,
        cond: &Condition,
        g: f64,
        observer: &mut dyn FnMut(usize, &Array2<f64>),
    ) -> Result<(FeatureMap, FlopCount, usize)> {
        let null = Condition::null(self.dim());
        if g == 0.0 {
            let (out, flops) = self.predictor.forward_observed(input, &null, observer)?;
            return Ok((out, flops, 1));
        }
        let (c, fc) = self.predictor.forward(input, cond)?;
        let (u, fu) = self.predictor.forward_observed(input, &null, observer)?;
        Ok((cfg_combine(&c, &u, g)?, fc + fu, 2))
    }

    /// Quantize `F_k^o`, add the upsampled residual to `F_{k−1}`, and
    /// downsample the result to the next scale's grid.
    pub fn apply_residual(&self, k: usize, f_prev: &FeatureMap, output: &FeatureMap) -> Result<Residual> {
        let grid = self.schedule.grid(k);
        if output.grid() != grid {
            return Err(Error::DimensionMismatch(format!(
                "scale {k} output grid {} vs {grid}",
                output.grid()
            )));
        }
        let (tokens, raw) = quantize(output, &self.codebook)?;
        let gain = residual_gain(self.residual_decay, k);
        let embedded = FeatureMap::new(raw.into_data() * gain, grid)?;
        let full = self.schedule.full_grid();
        let up = upsample(&embedded, full)?;
        let feature = FeatureMap::new(f_prev.data() + up.data(), full)?;
        let next_input = if k + 1 < self.schedule.len() {
            Some(downsample(&feature, self.schedule.grid(k + 1))?)
        } else {
            None
        };
        Ok(Residual {
            tokens,
            embedded,
            feature,
            next_input,
        })
    }

    /// One unaccelerated scale.
    pub fn vanilla_step(
        &self,
        k: usize,
        f_prev: &FeatureMap,
        f_tilde_prev: &FeatureMap,
        cond: &Condition,
        g: f64,
    ) -> Result<StepOutput> {
        self.vanilla_step_observed(k, f_prev, f_tilde_prev, cond, g, &mut |_, _| {})
    }

    fn vanilla_step_observed(
        &self,
        k: usize,
        f_prev: &FeatureMap,
        f_tilde_prev: &FeatureMap,
        cond: &Condition,
        g: f64,
        observer: &mut dyn FnMut(usize, &Array2<f64>),
    ) -> Result<StepOutput> {
        if k >= self.schedule.len() {
            return Err(Error::OutOfRange(format!("scale {k} of {}", self.schedule.len())));
        }
        if f_tilde_prev.grid() != self.schedule.grid(k) || f_prev.grid() != self.schedule.full_grid() {
            return Err(Error::DimensionMismatch(format!(
                "scale {k} expects input {} and running feature {}",
                self.schedule.grid(k),
                self.schedule.full_grid()
            )));
        }
        let t0 = Instant::now();
        let (output, flops, forwards) = self.guided_forward_observed(f_tilde_prev, cond, g, observer)?;
        let model_secs = t0.elapsed().as_secs_f64();
        let res = self.apply_residual(k, f_prev, &output)?;
        Ok(StepOutput {
            feature: res.feature,
            output,
            tokens: res.tokens,
            embedded: res.embedded,
            next_input: res.next_input,
            flops,
            forwards,
            model_secs,
        })
    }

    /// `F_0 = 0`, `F̃_0 = <SOS>`.
    pub fn initial_state(&self) -> (FeatureMap, FeatureMap) {
        (
            FeatureMap::zeros(self.schedule.full_grid(), self.dim()),
            self.predictor.start_token(),
        )
    }

    /// Runs scales `0..until` unaccelerated and returns the state that
    /// scale `until` would start from.
    pub fn vanilla_prefix(&self, prompt_seed: u64, g: f64, until: usize) -> Result<VanillaPrefix> {
        if until >= self.schedule.len() {
            return Err(Error::OutOfRange(format!("prefix of {until} scales leaves no next scale")));
        }
        let cond = self.condition(prompt_seed);
        let (mut feature, mut input) = self.initial_state();
        let mut last_output = None;
        for k in 0..until {
            let step = self.vanilla_step(k, &feature, &input, &cond, g)?;
            feature = step.feature;
            input = step.next_input.expect("k + 1 < len");
            last_output = Some(step.output);
        }
        Ok(VanillaPrefix {
            feature,
            input,
            last_output,
        })
    }

    /// Every scale unaccelerated with guidance `g`.
    pub fn generate_vanilla(&self, prompt_seed: u64, g: f64) -> Result<(FeatureMap, GenerationTrace)> {
        self.generate_vanilla_observed(prompt_seed, g, &mut |_, _, _| {})
    }

    /// As [`VarModel::generate_vanilla`], calling `observer(scale, block,
    /// input)` on every block input of the unconditional pass.
    pub fn generate_vanilla_observed(
        &self,
        prompt_seed: u64,
        g: f64,
        observer: &mut dyn FnMut(usize, usize, &Array2<f64>),
    ) -> Result<(FeatureMap, GenerationTrace)> {
        let cond = self.condition(prompt_seed);
        let (mut f, mut input) = self.initial_state();
        let mut trace = GenerationTrace::default();
        for k in 0..self.schedule.len() {
            let t0 = Instant::now();
            let step = self.vanilla_step_observed(k, &f, &input, &cond, g, &mut |b, x| observer(k, b, x))?;
            let total = t0.elapsed().as_secs_f64();
            trace.records.push(ScaleRecord {
                scale: k,
                grid: self.schedule.grid(k),
                tokens: step.tokens,
                feature: step.feature.clone(),
                output: step.output,
                flops: step.flops,
                forwards: step.forwards,
                block_ranks: Vec::new(),
                truncation: Vec::new(),
                timing: ScaleTiming {
                    model_secs: step.model_secs,
                    strategy_secs: 0.0,
                    other_secs: (total - step.model_secs).max(0.0),
                },
            });
            f = step.feature;
            if let Some(next) = step.next_input {
                input = next;
            }
        }
        Ok((f, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(sides: &[usize]) -> VarModel {
        ModelSpec {
            sides: sides.to_vec(),
            refinement_start: 1,
            channels: 8,
            heads: 2,
            blocks: 2,
            vocab: 32,
            ..ModelSpec::desk()
        }
        .build()
        .unwrap()
    }

    #[test]
    fn single_scale_schedule() {
        let m = tiny(&[1]);
        let (f, trace) = m.generate_vanilla(3, 2.0).unwrap();
        assert_eq!(f.tokens(), 1);
        assert_eq!(trace.records.len(), 1);
    }

    #[test]
    fn reruns_match() {
        let m = tiny(&[1, 2, 4]);
        let (a, ta) = m.generate_vanilla(9, 2.0).unwrap();
        let (b, tb) = m.generate_vanilla(9, 2.0).unwrap();
        assert_eq!(a, b);
        assert!(ta.content_eq(&tb));
        let (c, _) = m.generate_vanilla(10, 2.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_codebook_leaves_feature_unchanged() {
        let mut m = tiny(&[1, 2]);
        m.codebook = Codebook::zeros(4, 8).unwrap();
        let (f0, x0) = m.initial_state();
        let cond = m.condition(1);
        let step = m.vanilla_step(0, &f0, &x0, &cond, 2.0).unwrap();
        assert_eq!(step.feature, f0);
    }

    #[test]
    fn last_scale_has_no_next_input() {
        let m = tiny(&[1, 2]);
        let (f0, x0) = m.initial_state();
        let cond = m.condition(1);
        let s0 = m.vanilla_step(0, &f0, &x0, &cond, 2.0).unwrap();
        let x1 = s0.next_input.clone().unwrap();
        assert_eq!(x1.grid(), m.schedule.grid(1));
        let s1 = m.vanilla_step(1, &s0.feature, &x1, &cond, 2.0).unwrap();
        assert!(s1.next_input.is_none());
    }

    #[test]
    fn guidance_forward_counts() {
        let m = tiny(&[1, 2]);
        let (_, x0) = m.initial_state();
        let cond = m.condition(1);
        let (_, f0, n0) = m.guided_forward(&x0, &cond, 0.0).unwrap();
        let (_, f2, n2) = m.guided_forward(&x0, &cond, 2.0).unwrap();
        assert_eq!((n0, n2), (1, 2));
        assert_eq!(2 * f0.attention, f2.attention);
    }

    #[test]
    fn observer_sees_unconditional_inputs() {
        let m = tiny(&[1, 2]);
        let mut seen = Vec::new();
        let (plain, _) = m.generate_vanilla(4, 2.0).unwrap();
        let (f, _) = m
            .generate_vanilla_observed(4, 2.0, &mut |k, b, x| {
                if b == 0 {
                    seen.push((k, x.clone()));
                }
            })
            .unwrap();
        assert_eq!(f, plain);
        assert_eq!(seen.len(), 2);
        let null = Condition::null(m.dim());
        let (_, x0) = m.initial_state();
        assert_eq!(seen[0].1, m.predictor.prepare_input(&x0, &null).unwrap());
    }

    #[test]
    fn mismatched_spec_rejected() {
        let mut spec = ModelSpec::desk();
        spec.residual_decay = 0.0;
        assert!(spec.build().is_err());
        let m = tiny(&[1, 2]);
        let (f0, _) = m.initial_state();
        let cond = m.condition(1);
        assert!(m.vanilla_step(0, &f0, &f0, &cond, 2.0).is_err());
        assert!(m.vanilla_step(5, &f0, &f0, &cond, 2.0).is_err());
    }
}

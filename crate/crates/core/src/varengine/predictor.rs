//! Frozen, seeded-random transformer-style block stack.
//!
//! This is a toy stand-in for a trained next-scale predictor. Everything the
//! accelerator cares about survives without training: cost grows as `M²d` in
//! the attention, blocks are applied in sequence to an `M x d` residual
//! stream, and the same input always gives the same output.
//!
//! FLOP accounting per block on `M` rows of width `d`:
//! - attention: `4M²d + 8Md²` (q/k/v/out projections, scores, weighted sum),
//! - MLP: `16Md²` (two `d x 4d` projections).
//!
//! A multiply-add counts as two FLOPs; normalization, softmax and the
//! activation are not counted.

use std::ops::{Add, AddAssign};

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matgrid::{FeatureMap, Grid};
use crate::numcore::{gaussian_matrix, mix_seed};

/// Typical row norm added by one residual branch. Normalized rows have norm
/// `sqrt(d)`, so output projections carry an extra `1/sqrt(d)`; the stream
/// stays dominated by its input and deep stacks stay well scaled.
const BRANCH_GAIN: f64 = 0.15;
/// Amplitude of the positional embedding relative to a unit codeword.
const POSITION_GAIN: f64 = 6.0;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub num_blocks: usize,
    pub d: usize,
    pub heads: usize,
    pub seed: u64,
    pub flop_counter_enabled: bool,
}

impl PredictorConfig {
    pub fn new(d: usize, heads: usize, seed: u64) -> Self {
        Self {
            num_blocks: 8,
            d,
            heads,
            seed,
            flop_counter_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("predictor needs at least one block".into()));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Analytic FLOP tally, split the way the cost model is reported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub attention: u64,
    pub mlp: u64,
}

impl FlopCount {
    /// Closed-form cost of one block on `m` rows of width `d`.
    pub fn block(m: usize, d: usize) -> Self {
        let (m, d) = (m as u64, d as u64);
        Self {
            attention: 4 * m * m * d + 8 * m * d * d,
            mlp: 16 * m * d * d,
        }
    }

    /// Closed-form cost of a stack of `blocks` blocks.
    pub fn stack(m: usize, d: usize, blocks: usize) -> Self {
        let one = Self::block(m, d);
        Self {
            attention: one.attention * blocks as u64,
            mlp: one.mlp * blocks as u64,
        }
    }

    pub fn total(&self) -> u64 {
        self.attention + self.mlp
    }
}

impl Add for FlopCount {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            attention: self.attention + rhs.attention,
            mlp: self.mlp + rhs.mlp,
        }
    }
}

impl AddAssign for FlopCount {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Conditioning vector added to every token before the first block.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    embedding: Array1<f64>,
    is_null: bool,
}

impl Condition {
    /// Stand-in for a text embedding: `N(0, 1/d)` entries drawn from the
    /// prompt seed.
    pub fn from_prompt(prompt_seed: u64, d: usize) -> Self {
        let g = gaussian_matrix(d, 1, mix_seed(prompt_seed, 0xc0d), 1.0 / (d as f64).sqrt());
        Self {
            embedding: g.column(0).to_owned(),
            is_null: false,
        }
    }

    /// The empty prompt.
    pub fn null(d: usize) -> Self {
        Self {
            embedding: Array1::zeros(d),
            is_null: true,
        }
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }

    pub fn embedding(&self) -> &Array1<f64> {
        &self.embedding
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }
}

#[derive(Debug, Clone)]
struct BlockWeights {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w1: Array2<f64>,
    w2: Array2<f64>,
}

impl BlockWeights {
    fn seeded(d: usize, seed: u64) -> Self {
        let unit = 1.0 / (d as f64).sqrt();
        let wide = 1.0 / (4.0 * d as f64).sqrt();
        let branch = BRANCH_GAIN * unit;
        let m = |tag: u64, rows: usize, cols: usize, scale: f64| {
            gaussian_matrix(rows, cols, mix_seed(seed, tag), scale)
        };
        Self {
            wq: m(1, d, d, unit),
            wk: m(2, d, d, unit),
            wv: m(3, d, d, unit),
            wo: m(4, d, d, unit * branch),
            w1: m(5, d, 4 * d, unit),
            w2: m(6, 4 * d, d, wide * branch),
        }
    }
}

/// The reference predictor. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Predictor {
    config: PredictorConfig,
    blocks: Vec<BlockWeights>,
    start_token: Array1<f64>,
    /// `POSITION_BASIS x d` mixing of the smooth positional basis.
    position_mix: Array2<f64>,
}

const POSITION_BASIS: usize = 6;

/// Smooth functions of corner-aligned coordinates `y, x` in `[0, 1]`.
fn position_basis(grid: Grid) -> Array2<f64> {
    use std::f64::consts::PI;
    let coord = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut out = Array2::zeros((grid.tokens(), POSITION_BASIS));
    for i in 0..grid.h {
        for j in 0..grid.w {
            let (y, x) = (coord(i, grid.h), coord(j, grid.w));
            let row = [
                (PI * y).cos(),
                (PI * x).cos(),
                (2.0 * PI * y).cos(),
                (2.0 * PI * x).cos(),
                (PI * y).cos() * (PI * x).cos(),
                (PI * (y + x)).sin(),
            ];
            out.row_mut(i * grid.w + j).assign(&ndarray::aview1(&row));
        }
    }
    out
}

impl Predictor {
    pub fn new(config: PredictorConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.num_blocks)
            .map(|b| BlockWeights::seeded(config.d, mix_seed(config.seed, 100 + b as u64)))
            .collect();
        let unit = 1.0 / (config.d as f64).sqrt();
        let sos = gaussian_matrix(config.d, 1, mix_seed(config.seed, 0x505), unit);
        let position_mix = gaussian_matrix(
            POSITION_BASIS,
            config.d,
            mix_seed(config.seed, 0x9051),
            unit * POSITION_GAIN / (POSITION_BASIS as f64).sqrt(),
        );
        Ok(Self {
            blocks,
            start_token: sos.column(0).to_owned(),
            position_mix,
            config,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    /// The `1 x 1` start-of-sequence input of the first scale.
    pub fn start_token(&self) -> FeatureMap {
        FeatureMap::new(self.start_token.clone().insert_axis(Axis(0)), Grid::new(1, 1))
            .expect("start token is finite")
    }

    /// Positional embedding of a grid: a rank-limited smooth field.
    pub fn position_embedding(&self, grid: Grid) -> Array2<f64> {
        position_basis(grid).dot(&self.position_mix)
    }

    /// Input of the first block: the feature plus its positional embedding,
    /// plus the condition on every row. The null condition adds nothing.
    pub fn prepare_input(&self, f_in: &FeatureMap, cond: &Condition) -> Result<Array2<f64>> {
        if f_in.channels() != self.config.d || cond.dim() != self.config.d {
            return Err(Error::DimensionMismatch(format!(
                "predictor width {} vs input {} and condition {}",
                self.config.d,
                f_in.channels(),
                cond.dim()
            )));
        }
        let mut x = f_in.data() + &self.position_embedding(f_in.grid());
        if !cond.is_null() {
            x += &cond.embedding.view().insert_axis(Axis(0));
        }
        Ok(x)
    }

    /// One block on any number of rows.
    pub fn block_forward(&self, b: usize, x: &Array2<f64>, flops: &mut FlopCount) -> Result<Array2<f64>> {
        let w = self
            .blocks
            .get(b)
            .ok_or_else(|| Error::OutOfRange(format!("block {b} of {}", self.blocks.len())))?;
        let d = self.config.d;
        if x.ncols() != d {
            return Err(Error::DimensionMismatch(format!("block width {d} vs input {}", x.ncols())));
        }
        let m = x.nrows();
        let h = layer_norm(x);
        let q = h.dot(&w.wq);
        let k = h.dot(&w.wk);
        let v = h.dot(&w.wv);
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mixed = Array2::<f64>::zeros((m, d));
        for head in 0..heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let qh = &q.slice(cols) * scale;
            let kh = k.slice(cols).to_owned();
            let vh = v.slice(cols).to_owned();
            let mut scores = qh.dot(&kh.t());
            softmax_rows(&mut scores);
            mixed.slice_mut(cols).assign(&scores.dot(&vh));
        }
        let mut x1 = x + &mixed.dot(&w.wo);
        let mut hidden = layer_norm(&x1).dot(&w.w1);
        hidden.mapv_inplace(gelu);
        x1 += &hidden.dot(&w.w2);
        if !x1.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("block output"));
        }
        if self.config.flop_counter_enabled {
            *flops += FlopCount::block(m, d);
        }
        Ok(x1)
    }

    /// Full stack: condition injection, then every block in order.
    pub fn forward(&self, f_in: &FeatureMap, cond: &Condition) -> Result<(FeatureMap, FlopCount)> {
        self.forward_observed(f_in, cond, &mut |_, _| {})
    }

    /// As [`Predictor::forward`], calling `observer(b, input)` with each
    /// block's input before it runs.
    pub fn forward_observed(
        &self,
        f_in: &FeatureMap,
        cond: &Condition,
        observer: &mut dyn FnMut(usize, &Array2<f64>),
    ) -> Result<(FeatureMap, FlopCount)> {
        let mut flops = FlopCount::default();
        let mut x = self.prepare_input(f_in, cond)?;
        for b in 0..self.blocks.len() {
            observer(b, &x);
            x = self.block_forward(b, &x, &mut flops)?;
        }
        Ok((FeatureMap::new(x, f_in.grid())?, flops))
    }
}

/// Parameter-free layer normalization over channels.
fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    let d = x.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let row = row.as_slice_mut().expect("scores are contiguous");
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Tanh approximation of GELU.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Classifier-free guidance blend `uncond + g (cond - uncond)`. The two
/// endpoints return the corresponding input untouched.
pub fn cfg_combine(cond_out: &FeatureMap, uncond_out: &FeatureMap, g: f64) -> Result<FeatureMap> {
    if cond_out.grid() != uncond_out.grid() || cond_out.channels() != uncond_out.channels() {
        return Err(Error::DimensionMismatch(format!(
            "guidance inputs {}x{} vs {}x{}",
            cond_out.tokens(),
            cond_out.channels(),
            uncond_out.tokens(),
            uncond_out.channels()
        )));
    }
    if g == 0.0 {
        return Ok(uncond_out.clone());
    }
    if g == 1.0 {
        return Ok(cond_out.clone());
    }
    let u = uncond_out.data();
    let blended = u + &((cond_out.data() - u) * g);
    FeatureMap::new(blended, cond_out.grid())
}

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::matgrid::{upsample, FeatureMap, Grid};
use crate::numcore::sample_rows;

/// Block-stack output of the last executed scale, kept before quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputCache {
    pub output: FeatureMap,
    /// Scale that produced `output`.
    pub scale: usize,
}

impl OutputCache {
    pub fn new(output: FeatureMap, scale: usize) -> Self {
        Self { output, scale }
    }

    /// The cache resampled to the grid of the scale being computed.
    pub fn upsampled(&self, target: Grid) -> Result<FeatureMap> {
        upsample(&self.output, target)
    }
}

/// Places row `j` of `computed` at row `indices[j]` and takes every other
/// row from `filler`. `indices` must be distinct and ascending.
pub fn restore_rows(computed: &Array2<f64>, indices: &[usize], filler: &Array2<f64>) -> Result<Array2<f64>> {
    if computed.nrows() != indices.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} computed rows for {} indices",
            computed.nrows(),
            indices.len()
        )));
    }
    if computed.ncols() != filler.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "computed width {} vs filler width {}",
            computed.ncols(),
            filler.ncols()
        )));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) || indices.last().is_some_and(|&i| i >= filler.nrows()) {
        return Err(Error::OutOfRange(format!(
            "indices must ascend strictly within 0..{}",
            filler.nrows()
        )));
    }
    let mut out = filler.clone();
    for (j, &i) in indices.iter().enumerate() {
        out.row_mut(i).assign(&computed.row(j));
    }
    Ok(out)
}

/// Rebuilds an `M x d` output from `r` computed rows. The rows are placed
/// at `I = sample_rows(F̃_{k−1}, r, seed)`; every other row comes from the
/// cache upsampled to the grid of `f_tilde_prev`.
pub fn restore_tokens(
    f_r_out: &Array2<f64>,
    f_tilde_prev: &FeatureMap,
    cache: &OutputCache,
    r: usize,
    seed: u64,
) -> Result<FeatureMap> {
    if f_r_out.nrows() != r {
        return Err(Error::DimensionMismatch(format!(
            "{} computed rows but r = {r}",
            f_r_out.nrows()
        )));
    }
    let sample = sample_rows(f_tilde_prev.data(), r, seed)?;
    let grid = f_tilde_prev.grid();
    let filler = cache.upsampled(grid)?;
    FeatureMap::new(restore_rows(f_r_out, &sample.indices, filler.data())?, grid)
}

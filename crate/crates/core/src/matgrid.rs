//! Grid-shaped feature maps, corner-aligned bilinear resampling, and a 2-D
//! spectral energy split.
//!
//! A [`FeatureMap`] stores an `(h, w)` grid of `d`-channel tokens as an
//! `M x d` matrix with `M = h * w`, tokens in row-major grid order
//! (`token = row * w + col`).

use ndarray::{Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent `(h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub const fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub const fn square(side: usize) -> Self {
        Self { h: side, w: side }
    }

    /// Number of tokens.
    pub const fn tokens(&self) -> usize {
        self.h * self.w
    }

    fn check_nonzero(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::InvalidShape(format!(
                "grid dimensions must be positive, got {}x{}",
                self.h, self.w
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

/// A token grid with `d` channels per token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array2<f64>,
    grid: Grid,
}

impl FeatureMap {
    /// Wraps an `M x d` matrix; fails unless `M = h * w`, `d >= 1` and every
    /// entry is finite.
    pub fn new(data: Array2<f64>, grid: Grid) -> Result<Self> {
        grid.check_nonzero()?;
        if data.nrows() != grid.tokens() {
            return Err(Error::InvalidShape(format!(
                "{} rows cannot carry a {} grid",
                data.nrows(),
                grid
            )));
        }
        if data.ncols() == 0 {
            return Err(Error::InvalidShape("feature maps need at least one channel".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self { data, grid })
    }

    pub fn zeros(grid: Grid, d: usize) -> Self {
        Self {
            data: Array2::zeros((grid.tokens(), d)),
            grid,
        }
    }

    /// Every token equal to `token`.
    pub fn constant(grid: Grid, token: &[f64]) -> Result<Self> {
        let data = Array2::from_shape_fn((grid.tokens(), token.len()), |(_, c)| token[c]);
        Self::new(data, grid)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(&self.data.view())
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute distance when `other`
    /// is zero.
    pub fn relative_error(&self, reference: &FeatureMap) -> Result<f64> {
        if self.data.dim() != reference.data.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.data.dim(),
                reference.data.dim()
            )));
        }
        let diff = frobenius(&(&self.data - &reference.data).view());
        let base = reference.frobenius_norm();
        Ok(if base > 0.0 { diff / base } else { diff })
    }
}

pub(crate) fn frobenius(a: &ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Bilinear upsampling to a grid at least as large as the source in both axes.
pub fn upsample(f: &FeatureMap, target: Grid) -> Result<FeatureMap> {
    target.check_nonzero()?;
    if target.h < f.grid.h || target.w < f.grid.w {
        return Err(Error::InvalidShape(format!(
            "cannot upsample {} to smaller grid {}",
            f.grid, target
        )));
    }
    Ok(resample(f, target))
}

/// Bilinear downsampling to a grid no larger than the source in either axis.
pub fn downsample(f: &FeatureMap, target: Grid) -> Result<FeatureMap> {
    target.check_nonzero()?;
    if target.h > f.grid.h || target.w > f.grid.w {
        return Err(Error::InvalidShape(format!(
            "cannot downsample {} to larger grid {}",
            f.grid, target
        )));
    }
    Ok(resample(f, target))
}

/// Sample positions along one axis. Corner alignment maps index 0 to 0 and
/// the last target index to the last source index; a 1-pixel source or target
/// samples position 0 only.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn resample(f: &FeatureMap, target: Grid) -> FeatureMap {
    if target == f.grid {
        return f.clone();
    }
    let d = f.channels();
    let src_w = f.grid.w;
    let rows = axis_taps(f.grid.h, target.h);
    let cols = axis_taps(f.grid.w, target.w);
    let mut out = Array2::<f64>::zeros((target.tokens(), d));
    for (ti, &(y0, y1, ty)) in rows.iter().enumerate() {
        for (tj, &(x0, x1, tx)) in cols.iter().enumerate() {
            let a = f.data.row(y0 * src_w + x0);
            let b = f.data.row(y0 * src_w + x1);
            let c = f.data.row(y1 * src_w + x0);
            let e = f.data.row(y1 * src_w + x1);
            let mut dst = out.row_mut(ti * target.w + tj);
            for ch in 0..d {
                // a + t(b - a) keeps constant fields exact.
                let top = a[ch] + tx * (b[ch] - a[ch]);
                let bottom = c[ch] + tx * (e[ch] - c[ch]);
                dst[ch] = top + ty * (bottom - top);
            }
        }
    }
    FeatureMap { data: out, grid: target }
}

/// Spectral energy below and above a radial frequency cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSplit {
    pub low_energy: f64,
    pub high_energy: f64,
    pub cutoff_fraction: f64,
}

impl SpectrumSplit {
    pub fn total(&self) -> f64 {
        self.low_energy + self.high_energy
    }
}

/// Default band boundary, as a fraction of the largest radial frequency.
pub const DEFAULT_CUTOFF: f64 = 0.25;

/// Splits the per-channel 2-D DFT energy of `f` into a low and a high band.
///
/// Frequencies are measured in cycles per sample, folded to `[0, 1/2]` per
/// axis; the radial frequency is the Euclidean norm of the two axis
/// frequencies. A bin is low when it is DC or its radius is strictly below
/// `cutoff_fraction` times the largest radius representable on the grid.
/// Energies are normalised by `h * w`, so `low + high` equals the squared
/// Frobenius norm of `f`.
pub fn spectrum_split(f: &FeatureMap, cutoff_fraction: f64) -> Result<SpectrumSplit> {
    if !(cutoff_fraction > 0.0 && cutoff_fraction < 1.0) {
        return Err(Error::OutOfRange(format!(
            "cutoff_fraction must lie in (0, 1), got {cutoff_fraction}"
        )));
    }
    let Grid { h, w } = f.grid;
    let fold = |k: usize, n: usize| k.min(n - k) as f64 / n as f64;
    let rmax = ((h / 2) as f64 / h as f64).hypot((w / 2) as f64 / w as f64);
    let threshold = cutoff_fraction * rmax;
    let is_low: Vec<bool> = (0..h * w)
        .map(|idx| {
            let r = fold(idx / w, h).hypot(fold(idx % w, w));
            r == 0.0 || r < threshold
        })
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    let norm = (h * w) as f64;
    let (mut low, mut high) = (0.0, 0.0);
    for channel in f.data.axis_iter(Axis(1)) {
        for (slot, v) in buf.iter_mut().zip(channel.iter()) {
            *slot = Complex64::new(*v, 0.0);
        }
        for row in buf.chunks_mut(w) {
            row_fft.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col_fft.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
        for (bin, low_bin) in buf.iter().zip(&is_low) {
            let e = bin.norm_sqr() / norm;
            if *low_bin {
                low += e;
            } else {
                high += e;
            }
        }
    }
    Ok(SpectrumSplit {
        low_energy: low,
        high_energy: high,
        cutoff_fraction,
    })
}

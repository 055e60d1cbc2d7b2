use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matgrid::{downsample, upsample, FeatureMap};

use super::schedule::ScaleSchedule;

/// Vector-quantization table: `V` codewords of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vectors: Array2<f64>,
    seed: u64,
}

impl Codebook {
    /// Codewords with i.i.d. `N(0, 1/d)` entries, so rows have norm close to 1.
    pub fn random(size: usize, d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("codebook width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let vectors = Array2::from_shape_simple_fn((size, d), || {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        });
        Self::from_vectors(vectors, seed)
    }

    pub fn from_vectors(vectors: Array2<f64>, seed: u64) -> Result<Self> {
        if vectors.nrows() < 2 {
            return Err(Error::Config(format!(
                "codebook needs at least 2 vectors, got {}",
                vectors.nrows()
            )));
        }
        if vectors.ncols() == 0 {
            return Err(Error::Config("codebook width must be positive".into()));
        }
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("codebook"));
        }
        Ok(Self { vectors, seed })
    }

    pub fn zeros(size: usize, d: usize) -> Result<Self> {
        Self::from_vectors(Array2::zeros((size, d)), 0)
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    /// Index of the nearest codeword to `x` in squared Euclidean distance;
    /// ties go to the lower index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, row) in self.vectors.rows().into_iter().enumerate() {
            let dist: f64 = row.iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum();
            if dist < best.1 {
                best = (i, dist);
            }
        }
        best.0
    }

    /// Codewords for `tokens` laid out on `f`'s grid.
    pub fn embed(&self, tokens: &[usize], grid: crate::matgrid::Grid) -> Result<FeatureMap> {
        let mut out = Array2::zeros((tokens.len(), self.dim()));
        for (mut row, &t) in out.rows_mut().into_iter().zip(tokens) {
            if t >= self.size() {
                return Err(Error::OutOfRange(format!("token {t} outside vocabulary {}", self.size())));
            }
            row.assign(&self.vectors.row(t));
        }
        FeatureMap::new(out, grid)
    }
}

/// Nearest-codeword tokens for every row of `f`, plus the gathered codewords.
pub fn quantize(f: &FeatureMap, cb: &Codebook) -> Result<(Vec<usize>, FeatureMap)> {
    if f.channels() != cb.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature width {} vs codebook width {}",
            f.channels(),
            cb.dim()
        )));
    }
    let tokens: Vec<usize> = f
        .data()
        .rows()
        .into_iter()
        .map(|row| match row.as_slice() {
            Some(s) => cb.nearest(s),
            None => cb.nearest(&row.to_vec()),
        })
        .collect();
    let embedded = cb.embed(&tokens, f.grid())?;
    Ok((tokens, embedded))
}

/// Per-scale residual gain `decay^k`: the toy stand-in for the learned
/// per-scale residual transform of a multi-scale VQ decoder. It makes later
/// scales add progressively finer corrections.
pub fn residual_gain(decay: f64, k: usize) -> f64 {
    decay.powi(k as i32)
}

/// One scale of a multi-scale residual encoding.
#[derive(Debug, Clone)]
pub struct EncodedScale {
    pub tokens: Vec<usize>,
    /// Least-squares gain applied to the upsampled codewords.
    pub gain: f64,
    /// Running reconstruction at the full grid after this scale.
    pub reconstruction: FeatureMap,
}

/// Gain-shape residual encoding of a full-resolution feature: at scale `k`
/// the residual is downsampled, quantized against `residual / decay^k`, and
/// the upsampled codewords are added with the nonnegative least-squares gain.
/// The reconstruction error is nonincreasing in `k` by construction of the
/// gain (a zero gain leaves the residual unchanged).
pub fn encode_multiscale(
    target: &FeatureMap,
    schedule: &ScaleSchedule,
    cb: &Codebook,
    decay: f64,
) -> Result<Vec<EncodedScale>> {
    let full = schedule.full_grid();
    if target.grid() != full {
        return Err(Error::DimensionMismatch(format!(
            "target grid {} vs schedule grid {}",
            target.grid(),
            full
        )));
    }
    let mut recon = FeatureMap::zeros(full, target.channels());
    let mut out = Vec::with_capacity(schedule.len());
    for (k, &grid) in schedule.scales().iter().enumerate() {
        let residual = FeatureMap::new(target.data() - recon.data(), full)?;
        let coarse = downsample(&residual, grid)?;
        let nominal = residual_gain(decay, k);
        let probe = FeatureMap::new(coarse.data() / nominal, grid)?;
        let (tokens, embedded) = quantize(&probe, cb)?;
        let up = upsample(&embedded, full)?;
        let num: f64 = (up.data() * residual.data()).sum();
        let den: f64 = up.data().iter().map(|v| v * v).sum();
        let gain = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
        recon = FeatureMap::new(recon.data() + &(up.data() * gain), full)?;
        out.push(EncodedScale {
            tokens,
            gain,
            reconstruction: recon.clone(),
        });
    }
    Ok(out)
}

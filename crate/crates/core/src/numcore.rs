//! Dense numerical kernels: SVD with a fixed sign convention, energy-ratio
//! rank selection, rank-r truncation, Gaussian random projection, minimum-norm
//! linear least squares, and squared-norm row sampling.
//!
//! Randomness is always explicit: every randomized routine takes a `seed` and
//! derives a private ChaCha stream from it.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{JobSvd, QR, SVDDC};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Thin SVD `A = U diag(sigma) Vt` with `n = min(M, d)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `M x n`, orthonormal columns.
    pub u: Array2<f64>,
    /// Nonincreasing, nonnegative.
    pub sigma: Array1<f64>,
    /// `n x d`, orthonormal rows.
    pub vt: Array2<f64>,
}

impl SvdFactors {
    pub fn components(&self) -> usize {
        self.sigma.len()
    }

    /// `diag(sigma_r) Vt_r`, the `r x d` coordinates of the rows of `A` in the
    /// top-`r` left singular basis.
    pub fn row_space_coordinates(&self, r: usize) -> Result<Array2<f64>> {
        check_rank(r, self.components())?;
        let mut out = self.vt.slice(s![..r, ..]).to_owned();
        for (mut row, &sv) in out.axis_iter_mut(Axis(0)).zip(self.sigma.iter()) {
            row *= sv;
        }
        Ok(out)
    }
}

fn check_finite(a: &ArrayView2<'_, f64>, what: &'static str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_rank(r: usize, n: usize) -> Result<()> {
    if r == 0 || r > n {
        return Err(Error::OutOfRange(format!("rank {r} outside 1..={n}")));
    }
    Ok(())
}

/// Flips each singular pair so the largest-magnitude entry of `u_i` is
/// nonnegative (first such entry on ties).
fn fix_signs(u: &mut Array2<f64>, vt: &mut Array2<f64>) {
    for i in 0..u.ncols() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for &v in u.column(i) {
            if v.abs() > best {
                best = v.abs();
                sign = if v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        if sign < 0.0 {
            u.column_mut(i).mapv_inplace(|x| -x);
            vt.row_mut(i).mapv_inplace(|x| -x);
        }
    }
}

/// Full thin SVD (LAPACK divide and conquer).
pub fn svd(a: &Array2<f64>) -> Result<SvdFactors> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidShape("svd of an empty matrix".into()));
    }
    check_finite(&a.view(), "svd input")?;
    let (u, sigma, vt) = a
        .svddc(JobSvd::Some)
        .map_err(|e| Error::NumericFailure(format!("svd: {e}")))?;
    let (mut u, mut vt) = match (u, vt) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::NumericFailure("svd returned no singular vectors".into())),
    };
    fix_signs(&mut u, &mut vt);
    Ok(SvdFactors { u, sigma, vt })
}

/// Singular values only, nonincreasing.
pub fn singular_values(a: &Array2<f64>) -> Result<Array1<f64>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidShape("svd of an empty matrix".into()));
    }
    check_finite(&a.view(), "svd input")?;
    let (_, sigma, _) = a
        .svddc(JobSvd::None)
        .map_err(|e| Error::NumericFailure(format!("svd: {e}")))?;
    Ok(sigma)
}

/// Rank-`r` decomposition without a full SVD: randomized subspace iteration
/// with a fixed internal seed, two power passes and up to ten oversampling
/// columns, then an SVD of the small projected matrix.
///
/// Exact when `rank(A) <= r`; otherwise the leading triplets are
/// approximations whose quality depends on the spectral gap after `r`.
pub fn rank_r_svd(a: &Array2<f64>, r: usize) -> Result<SvdFactors> {
    let n = a.nrows().min(a.ncols());
    check_rank(r, n)?;
    check_finite(&a.view(), "rank-r svd input")?;
    const SKETCH_SEED: u64 = 0x5eed_0f_5a_7c4;
    const POWER_PASSES: usize = 2;
    let k = (r + 10).min(n);
    if k == n {
        let mut full = svd(a)?;
        full.u = full.u.slice(s![.., ..r]).to_owned();
        full.sigma = full.sigma.slice(s![..r]).to_owned();
        full.vt = full.vt.slice(s![..r, ..]).to_owned();
        return Ok(full);
    }
    let omega = gaussian_matrix(a.ncols(), k, SKETCH_SEED, 1.0);
    let mut basis = orthonormal_basis(&a.dot(&omega))?;
    for _ in 0..POWER_PASSES {
        let z = orthonormal_basis(&a.t().dot(&basis))?;
        basis = orthonormal_basis(&a.dot(&z))?;
    }
    let small = basis.t().dot(a);
    let (ub, sigma, vt) = small
        .svddc(JobSvd::Some)
        .map_err(|e| Error::NumericFailure(format!("rank-r svd: {e}")))?;
    let (ub, vt) = match (ub, vt) {
        (Some(ub), Some(vt)) => (ub, vt),
        _ => return Err(Error::NumericFailure("rank-r svd lost its factors".into())),
    };
    let mut u = basis.dot(&ub.slice(s![.., ..r]));
    let mut vt = vt.slice(s![..r, ..]).to_owned();
    fix_signs(&mut u, &mut vt);
    Ok(SvdFactors {
        u,
        sigma: sigma.slice(s![..r]).to_owned(),
        vt,
    })
}

fn orthonormal_basis(y: &Array2<f64>) -> Result<Array2<f64>> {
    let (q, _) = y
        .qr()
        .map_err(|e| Error::NumericFailure(format!("qr: {e}")))?;
    Ok(q)
}

/// Fraction of squared singular mass in the top `r` values.
pub fn energy_ratio(sigma: &[f64], r: usize) -> Result<f64> {
    check_rank(r, sigma.len())?;
    let mut head = 0.0;
    let mut total = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        let e = s * s;
        if i < r {
            head += e;
        }
        total += e;
    }
    if total == 0.0 {
        return Err(Error::Degenerate("all singular values are zero".into()));
    }
    if r == sigma.len() {
        return Ok(1.0);
    }
    Ok(head / total)
}

/// Smallest `r` whose energy ratio reaches `alpha`.
pub fn select_rank(sigma: &[f64], alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::OutOfRange(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let energies: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let total: f64 = energies.iter().sum();
    if sigma.is_empty() || total == 0.0 {
        return Err(Error::Degenerate("all singular values are zero".into()));
    }
    // Same accumulation order as `energy_ratio`, so the two always agree.
    let mut head = 0.0;
    for (i, e) in energies.iter().enumerate() {
        head += e;
        let ratio = if i + 1 == sigma.len() { 1.0 } else { head / total };
        if ratio >= alpha {
            return Ok(i + 1);
        }
    }
    Ok(sigma.len())
}

/// `sum_{i<=r} sigma_i u_i v_i^T`.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<Array2<f64>> {
    let coords = f.row_space_coordinates(r)?;
    Ok(f.u.slice(s![.., ..r]).dot(&coords))
}

/// `sqrt(sum_{i>r} sigma_i^2)`, the Frobenius error of [`truncate`].
pub fn tail_norm(sigma: &[f64], r: usize) -> f64 {
    sigma.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
}

/// Gaussian sketching matrix with `N(0, 1/r)` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    /// `M x r`.
    pub q: Array2<f64>,
    pub seed: u64,
    pub r: usize,
}

impl ProjectionMatrix {
    /// Entries are generated column by column from one stream, so for a fixed
    /// seed the first `r'` columns of a width-`r` matrix equal the width-`r'`
    /// matrix up to the `sqrt(r'/r)` variance rescale.
    pub fn new(m: usize, r: usize, seed: u64) -> Result<Self> {
        if r == 0 || r > m {
            return Err(Error::OutOfRange(format!("projection width {r} outside 1..={m}")));
        }
        let q = gaussian_matrix(m, r, seed, 1.0 / (r as f64).sqrt());
        Ok(Self { q, seed, r })
    }
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array2::<f64>::zeros((rows, cols));
    for j in 0..cols {
        for i in 0..rows {
            let z: f64 = rng.sample(StandardNormal);
            m[[i, j]] = z * scale;
        }
    }
    m
}

/// `Fr = Q^T A` with a freshly seeded `M x r` Gaussian `Q`.
pub fn random_project(a: &Array2<f64>, r: usize, seed: u64) -> Result<(Array2<f64>, ProjectionMatrix)> {
    let q = ProjectionMatrix::new(a.nrows(), r, seed)?;
    let fr = q.q.t().dot(a);
    Ok((fr, q))
}

/// Moore-Penrose pseudo-inverse via SVD, dropping singular values below
/// `max(rows, cols) * eps * sigma_max`.
pub fn pinv(b: &Array2<f64>) -> Result<Array2<f64>> {
    let f = svd(b)?;
    let smax = f.sigma.first().copied().unwrap_or(0.0);
    let tol = b.nrows().max(b.ncols()) as f64 * f64::EPSILON * smax;
    let keep = f.sigma.iter().take_while(|&&s| s > tol).count();
    let mut vs = f.vt.slice(s![..keep, ..]).t().to_owned();
    for (mut col, &sv) in vs.axis_iter_mut(Axis(1)).zip(f.sigma.iter()) {
        col /= sv;
    }
    Ok(vs.dot(&f.u.slice(s![.., ..keep]).t()))
}

/// Minimum-norm `W` (`M x r`) minimising `‖B^T W^T − T^T‖_F`, i.e. the best
/// reconstruction `T ≈ W B` of each row of `T` from the rows of `B`.
pub fn solve_lls(b: &Array2<f64>, t: &Array2<f64>) -> Result<Array2<f64>> {
    if b.ncols() != t.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} columns, target has {}",
            b.ncols(),
            t.ncols()
        )));
    }
    check_finite(&b.view(), "least-squares design")?;
    check_finite(&t.view(), "least-squares target")?;
    if b.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("least-squares design matrix is zero".into()));
    }
    Ok(t.dot(&pinv(b)?))
}

/// Rows drawn by squared-norm importance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledIndices {
    /// Distinct, ascending.
    pub indices: Vec<usize>,
    /// `‖row_i‖² / ‖A‖_F²`.
    pub probabilities: Vec<f64>,
}

/// `P_i = ‖row_i‖² / ‖A‖_F²`.
pub fn row_probabilities(a: &Array2<f64>) -> Result<Vec<f64>> {
    let norms: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let total: f64 = norms.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("cannot sample rows of a zero matrix".into()));
    }
    Ok(norms.into_iter().map(|n| n / total).collect())
}

/// Draws `r` distinct rows without replacement. Each draw picks among the
/// remaining rows with probability proportional to `P_i`; the draw sequence
/// depends only on `(A, seed)`, so smaller `r` with the same seed yields a
/// prefix of the same draws.
pub fn sample_rows(a: &Array2<f64>, r: usize, seed: u64) -> Result<SampledIndices> {
    let probabilities = row_probabilities(a)?;
    let mut indices = draw_without_replacement(&probabilities, r, seed)?;
    indices.sort_unstable();
    Ok(SampledIndices { indices, probabilities })
}

/// The draws of [`sample_rows`] in the order they were made, before sorting.
/// Sorting the first `r'` entries gives `sample_rows(a, r', seed)`.
pub fn draw_rows(a: &Array2<f64>, r: usize, seed: u64) -> Result<Vec<usize>> {
    draw_without_replacement(&row_probabilities(a)?, r, seed)
}

fn draw_without_replacement(p: &[f64], r: usize, seed: u64) -> Result<Vec<usize>> {
    let nonzero = p.iter().filter(|&&x| x > 0.0).count();
    if r == 0 || r > nonzero {
        return Err(Error::OutOfRange(format!(
            "cannot draw {r} rows from {nonzero} nonzero rows"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = p.to_vec();
    let mut out = Vec::with_capacity(r);
    for _ in 0..r {
        let total: f64 = weights.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        let mut last_positive = 0;
        for (i, &wt) in weights.iter().enumerate() {
            if wt <= 0.0 {
                continue;
            }
            last_positive = i;
            acc += wt;
            if acc > target {
                pick = Some(i);
                break;
            }
        }
        let i = pick.unwrap_or(last_positive);
        out.push(i);
        weights[i] = 0.0;
    }
    Ok(out)
}

/// SplitMix64 finaliser; used to derive independent stream seeds.
pub fn mix_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stagevar_core::varengine::{ModelSpec, VarModel};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
    let den = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Eigenvalues of the smaller Gram matrix, descending and clamped at 0:
/// the squared singular values, without going through an SVD.
pub fn gram_spectrum(a: &Array2<f64>) -> Vec<f64> {
    let g = if a.nrows() >= a.ncols() { a.t().dot(a) } else { a.dot(&a.t()) };
    let (vals, _) = g.eigh(UPLO::Lower).expect("symmetric eigensolve");
    let mut v: Vec<f64> = vals.iter().map(|&x| x.max(0.0)).collect();
    v.sort_by(|x, y| y.total_cmp(x));
    v
}

/// `sqrt(Σ_{i>r} λ_i)` from [`gram_spectrum`].
pub fn gram_tail(a: &Array2<f64>, r: usize) -> f64 {
    gram_spectrum(a).iter().skip(r).sum::<f64>().sqrt()
}

/// Pseudo-inverse of a symmetric PSD matrix by eigendecomposition.
pub fn sym_pinv(s: &Array2<f64>) -> Array2<f64> {
    let (vals, vecs) = s.eigh(UPLO::Lower).expect("symmetric eigensolve");
    let vmax = vals.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let tol = s.nrows() as f64 * 1e-12 * vmax;
    let inv: Array1<f64> = vals.mapv(|v| if v > tol { 1.0 / v } else { 0.0 });
    let scaled = &vecs * &inv;
    scaled.dot(&vecs.t())
}

/// Minimum-norm `W` with `T ≈ W B` from the normal equations
/// `W (B Bᵀ) = T Bᵀ`.
pub fn normal_equations_lls(b: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
    t.dot(&b.t()).dot(&sym_pinv(&b.dot(&b.t())))
}

/// Five scales up to 8x8, refinement over the last two, 8 channels.
pub fn small_spec() -> ModelSpec {
    ModelSpec {
        sides: vec![1, 2, 4, 6, 8],
        refinement_start: 3,
        channels: 8,
        heads: 2,
        blocks: 2,
        vocab: 64,
        weight_seed: 11,
        codebook_seed: 12,
        residual_decay: 0.7,
    }
}

pub fn small_model() -> VarModel {
    small_spec().build().expect("small spec is valid")
}

pub fn desk_model() -> VarModel {
    ModelSpec::desk().build().expect("desk spec is valid")
}

/// Path of a file under `tests/golden`.
pub fn golden_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// True when golden files should be rewritten instead of compared.
pub fn regen() -> bool {
    std::env::var_os("STAGEVAR_REGEN_GOLDEN").is_some_and(|v| v == "1")
}

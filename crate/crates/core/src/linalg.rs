//! Tolerance-aware dense kernel computations shared by every module.
//!
//! Rank decisions go through singular values with a relative cutoff: the
//! degeneracy probes need the smallest retained singular value as a
//! continuous signal, which pivoted elimination cannot provide.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Numerical thresholds used across the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Relative singular-value cutoff for rank/kernel decisions.
    pub rank_rel: f64,
    /// Normal-speed threshold below which a collision counts as tangential.
    pub tangency_eps: f64,
    /// Two impact times closer than this make a multiple (corner) event.
    pub coincidence_eps: f64,
    /// Residual target for bisection root refinement.
    pub bisection_res: f64,
    /// Step for finite-difference probes.
    pub fd_step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rank_rel: 1e-8,
            tangency_eps: 1e-10,
            coincidence_eps: 1e-9,
            bisection_res: 1e-12,
            fd_step: 1e-6,
        }
    }
}

impl Tolerances {
    /// All thresholds must be strictly positive and the rank cutoff < 1.
    pub fn validate(&self) -> Result<(), LinalgError> {
        let fields = [
            self.rank_rel,
            self.tangency_eps,
            self.coincidence_eps,
            self.bisection_res,
            self.fd_step,
        ];
        if fields.iter().any(|&t| !(t > 0.0) || !t.is_finite()) || self.rank_rel >= 1.0 {
            return Err(LinalgError::InvalidTolerances);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix contains non-finite entries")]
    InvalidMatrix,
    #[error("tolerances must be strictly positive with rank_rel < 1")]
    InvalidTolerances,
    #[error("singular value decomposition did not converge")]
    SvdFailed,
}

/// Kernel (right null space) of a dense matrix at a relative cutoff.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelResult {
    /// Number of singular values below `rank_rel · σ_max`.
    pub dimension: usize,
    /// Orthonormal kernel basis, one column per vector (`cols × dimension`).
    pub basis: DMatrix<f64>,
    /// Smallest singular value above the cutoff; `None` for an all-zero map.
    pub sigma_min_nonkernel: Option<f64>,
    /// Largest singular value.
    pub sigma_max: f64,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
}

impl KernelResult {
    pub fn rank(&self) -> usize {
        self.basis.nrows() - self.dimension
    }
}

/// One-sided Jacobi SVD: orthogonalizes the columns of a working copy by
/// plane rotations, accumulating the rotations into `V`. Returns one singular
/// value per column (unsorted) and the orthonormal right-singular vectors.
///
/// Chosen over a Golub–Kahan bidiagonalization because the kernel detector
/// needs the small singular values and their vectors to stay correctly
/// paired on wide, rank-deficient systems, and because the one-sided sweep
/// handles `cols > rows` without a separate basis-completion step.
fn jacobi_svd(matrix: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = matrix.ncols();
    let mut work = matrix.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    const MAX_SWEEPS: usize = 60;
    const CONV: f64 = 1e-15;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let app = work.column(p).norm_squared();
                let aqq = work.column(q).norm_squared();
                let apq = work.column(p).dot(&work.column(q));
                if apq.abs() <= CONV * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for r in 0..work.nrows() {
                    let (wp, wq) = (work[(r, p)], work[(r, q)]);
                    work[(r, p)] = cs * wp - sn * wq;
                    work[(r, q)] = sn * wp + cs * wq;
                }
                for r in 0..n {
                    let (vp, vq) = (v[(r, p)], v[(r, q)]);
                    v[(r, p)] = cs * vp - sn * vq;
                    v[(r, q)] = sn * vp + cs * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let sigmas = (0..n).map(|j| work.column(j).norm()).collect();
    (sigmas, v)
}

/// Kernel of `matrix` with the relative singular-value cutoff of `tol`.
///
/// A matrix with zero rows (or an exactly zero matrix) has a full kernel.
pub fn kernel(matrix: &DMatrix<f64>, tol: &Tolerances) -> Result<KernelResult, LinalgError> {
    tol.validate()?;
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::InvalidMatrix);
    }
    let cols = matrix.ncols();
    assert!(cols >= 1, "kernel of a matrix with no columns");
    if matrix.nrows() == 0 {
        return Ok(KernelResult {
            dimension: cols,
            basis: DMatrix::identity(cols, cols),
            sigma_min_nonkernel: None,
            sigma_max: 0.0,
            singular_values: Vec::new(),
        });
    }

    let (raw_sigmas, v) = jacobi_svd(matrix);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| raw_sigmas[b].partial_cmp(&raw_sigmas[a]).unwrap());
    let sigmas: Vec<f64> = order.iter().map(|&i| raw_sigmas[i]).collect();
    let sigma_max = sigmas[0];

    let cutoff = tol.rank_rel * sigma_max;
    let rank = if sigma_max <= 0.0 {
        0
    } else {
        sigmas.iter().filter(|&&s| s >= cutoff).count()
    };
    let dimension = cols - rank;

    let mut basis = DMatrix::zeros(cols, dimension);
    for (k, &oi) in order[rank..].iter().enumerate() {
        basis.set_column(k, &v.column(oi));
    }
    let sigma_min_nonkernel = if rank > 0 { Some(sigmas[rank - 1]) } else { None };

    Ok(KernelResult {
        dimension,
        basis,
        sigma_min_nonkernel,
        sigma_max,
        singular_values: sigmas,
    })
}

/// Rank of `matrix` at the tolerance cutoff.
pub fn rank(matrix: &DMatrix<f64>, tol: &Tolerances) -> Result<usize, LinalgError> {
    Ok(kernel(matrix, tol)?.rank())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent rank oracle: Gaussian elimination with partial pivoting.
    fn elimination_rank(matrix: &DMatrix<f64>, tol: f64) -> usize {
        let mut m = matrix.clone();
        let scale = m.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1e-300);
        let (rows, cols) = m.shape();
        let mut rank = 0;
        let mut row = 0;
        for col in 0..cols {
            let (pivot, pmax) = (row..rows)
                .map(|r| (r, m[(r, col)].abs()))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap_or((row, 0.0));
            if pmax <= tol * scale {
                continue;
            }
            m.swap_rows(row, pivot);
            for r in row + 1..rows {
                let f = m[(r, col)] / m[(row, col)];
                for c in col..cols {
                    m[(r, c)] -= f * m[(row, c)];
                }
            }
            rank += 1;
            row += 1;
            if row == rows {
                break;
            }
        }
        rank
    }

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| {
            rand_distr::StandardNormal.sample(rng)
        })
    }

    #[test]
    fn zero_matrix_has_full_kernel() {
        let m = DMatrix::zeros(3, 3);
        let k = kernel(&m, &Tolerances::default()).unwrap();
        assert_eq!(k.dimension, 3);
        assert!(k.sigma_min_nonkernel.is_none());
    }

    #[test]
    fn identity_has_trivial_kernel() {
        let m = DMatrix::identity(4, 4);
        let k = kernel(&m, &Tolerances::default()).unwrap();
        assert_eq!(k.dimension, 0);
        assert_eq!(k.sigma_min_nonkernel, Some(1.0));
    }

    #[test]
    fn sum_of_two_rank_one_outer_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tol = Tolerances::default();
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 4, 1);
            let b = random_matrix(&mut rng, 4, 1);
            let c = random_matrix(&mut rng, 4, 1);
            let d = random_matrix(&mut rng, 4, 1);
            let m = &a * b.transpose() + &c * d.transpose();
            let k = kernel(&m, &tol).unwrap();
            assert_eq!(k.dimension, 2);
            assert_eq!(elimination_rank(&m, 1e-10), 2);
        }
    }

    #[test]
    fn kernel_basis_is_orthonormal_and_annihilated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tol = Tolerances::default();
        for _ in 0..20 {
            let b = random_matrix(&mut rng, 6, 3);
            let c = random_matrix(&mut rng, 3, 8);
            let m = &b * &c; // rank 3, kernel 5
            let k = kernel(&m, &tol).unwrap();
            assert_eq!(k.dimension, 5);
            let gram = k.basis.transpose() * &k.basis;
            assert!((gram - DMatrix::identity(5, 5)).norm() < 1e-12);
            let image = &m * &k.basis;
            assert!(image.norm() <= tol.rank_rel * m.norm() * 10.0);
        }
    }

    #[test]
    fn wide_matrix_kernel_is_completed() {
        // 2×5 matrix: at most rank 2, kernel at least 3.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 2, 5);
        let k = kernel(&m, &Tolerances::default()).unwrap();
        assert_eq!(k.dimension, 3);
        let gram = k.basis.transpose() * &k.basis;
        assert!((gram - DMatrix::identity(3, 3)).norm() < 1e-10);
        assert!((&m * &k.basis).norm() < 1e-10 * m.norm().max(1.0));
    }

    #[test]
    fn zero_rows_matrix() {
        let m = DMatrix::zeros(0, 4);
        let k = kernel(&m, &Tolerances::default()).unwrap();
        assert_eq!(k.dimension, 4);
    }

    #[test]
    fn non_finite_entries_rejected() {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 0)] = f64::NAN;
        assert!(matches!(
            kernel(&m, &Tolerances::default()),
            Err(LinalgError::InvalidMatrix)
        ));
    }

    #[test]
    fn constructed_rank_matches_in_one_thousand_trials() {
        let tol = Tolerances::default();
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = rng.random_range(1..=20);
            let cols = rng.random_range(1..=20);
            let k = rng.random_range(0..=rows.min(cols));
            let m = if k == 0 {
                DMatrix::zeros(rows, cols)
            } else {
                random_matrix(&mut rng, rows, k) * random_matrix(&mut rng, k, cols)
            };
            let res = kernel(&m, &tol).unwrap();
            assert_eq!(res.dimension, cols - k, "seed {seed} ({rows}x{cols}, rank {k})");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dimension_invariant_under_row_permutation_and_scaling(
            seed in 0u64..5000,
            scale in 1e-3..1e3f64,
            swap_a in 0usize..5,
            swap_b in 0usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(1..=4usize);
            let m = random_matrix(&mut rng, 5, k) * random_matrix(&mut rng, k, 6);
            let tol = Tolerances::default();
            let base = kernel(&m, &tol).unwrap().dimension;

            let mut permuted = m.clone();
            permuted.swap_rows(swap_a, swap_b);
            prop_assert_eq!(kernel(&permuted, &tol).unwrap().dimension, base);

            let scaled = &m * scale;
            prop_assert_eq!(kernel(&scaled, &tol).unwrap().dimension, base);
        }
    }
}

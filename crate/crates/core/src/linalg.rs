//! Dense least squares via one-sided Jacobi SVD.
//!
//! Jacobi is slower than Householder QR but simple, numerically robust, and
//! free of pivoting choices that could differ across platforms. Sweeps visit
//! column pairs in a fixed order, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Outcome of a least-squares solve.
#[derive(Clone, Debug)]
pub struct LstsqResult<F> {
    /// Minimizer of the Frobenius residual, `[d, d']`. Minimum-norm when the
    /// system is rank deficient.
    pub solution: Tensor<F>,
    /// Numerical rank of the coefficient matrix.
    pub rank: usize,
    /// True when `rank < d`, i.e. the minimizer is not unique.
    pub rank_deficient: bool,
}

/// Columns of the worked matrix, its right singular vectors, and squared
/// column norms after Jacobi sweeps.
struct JacobiSvd<F> {
    // w[j] is the j-th column of U * Sigma, length n.
    w: Vec<Vec<F>>,
    // v[j] is the j-th right singular vector, length d.
    v: Vec<Vec<F>>,
    sigma: Vec<F>,
}

const MAX_SWEEPS: usize = 64;

fn jacobi_svd<F: Real>(a: &Tensor<F>) -> JacobiSvd<F> {
    let n = a.shape()[0];
    let d = a.shape()[1];
    let mut w: Vec<Vec<F>> = (0..d)
        .map(|j| (0..n).map(|i| a.data()[i * d + j]).collect())
        .collect();
    let mut v: Vec<Vec<F>> = (0..d)
        .map(|j| {
            let mut col = vec![F::zero(); d];
            col[j] = F::one();
            col
        })
        .collect();

    let tol = F::epsilon() * F::from_f64(n.max(d) as f64);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in (p + 1)..d {
                let mut alpha = F::zero();
                let mut beta = F::zero();
                let mut gamma = F::zero();
                for i in 0..n {
                    alpha += w[p][i] * w[p][i];
                    beta += w[q][i] * w[q][i];
                    gamma += w[p][i] * w[q][i];
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == F::zero() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (F::from_f64(2.0) * gamma);
                let t = {
                    let s = if zeta >= F::zero() { F::one() } else { -F::one() };
                    s / (zeta.abs() + (F::one() + zeta * zeta).sqrt())
                };
                let c = F::one() / (F::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let wp = w[p][i];
                    let wq = w[q][i];
                    w[p][i] = c * wp - s * wq;
                    w[q][i] = s * wp + c * wq;
                }
                for i in 0..d {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma = w
        .iter()
        .map(|col| {
            let mut s = F::zero();
            for &x in col {
                s += x * x;
            }
            s.sqrt()
        })
        .collect();
    JacobiSvd { w, v, sigma }
}

fn rank_threshold<F: Real>(sigma: &[F], n: usize, d: usize) -> F {
    let sigma_max = sigma.iter().cloned().fold(F::zero(), F::max);
    F::epsilon() * F::from_f64(n.max(d) as f64) * sigma_max
}

/// Minimum-norm least-squares solution of `A X = B` with `A [n,d]`,
/// `B [n,d']`. Singular directions below `eps * max(n,d) * sigma_max` are
/// treated as null and excluded, which is what makes the solution minimum
/// norm under rank deficiency.
pub fn least_squares_solve<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<LstsqResult<F>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "least_squares_solve",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = a.shape()[0];
    let d = a.shape()[1];
    let dp = b.shape()[1];
    if n == 0 || d == 0 {
        return Err(Error::invalid("least_squares_solve", "empty coefficient matrix"));
    }
    if !a.all_finite() || !b.all_finite() {
        return Err(Error::NonFinite {
            op: "least_squares_solve".into(),
        });
    }

    let svd = jacobi_svd(a);
    let thresh = rank_threshold(&svd.sigma, n, d);
    let mut rank = 0usize;
    let mut x = vec![F::zero(); d * dp];
    for j in 0..d {
        if svd.sigma[j] <= thresh || svd.sigma[j] == F::zero() {
            continue;
        }
        rank += 1;
        // coefficient row: (U_j^T B) / sigma_j = (W_j^T B) / sigma_j^2
        let inv_s2 = F::one() / (svd.sigma[j] * svd.sigma[j]);
        for c in 0..dp {
            let mut acc = F::zero();
            for i in 0..n {
                acc += svd.w[j][i] * b.data()[i * dp + c];
            }
            acc *= inv_s2;
            for r in 0..d {
                x[r * dp + c] += svd.v[j][r] * acc;
            }
        }
    }
    Ok(LstsqResult {
        solution: Tensor::new(vec![d, dp], x)?,
        rank,
        rank_deficient: rank < d,
    })
}

/// Moore-Penrose pseudo-inverse of `A [n,d]`, returned as `[d,n]`.
pub fn pseudo_inverse<F: Real>(a: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 {
        return Err(Error::invalid(
            "pseudo_inverse",
            format!("expected a matrix, got shape {:?}", a.shape()),
        ));
    }
    let n = a.shape()[0];
    let d = a.shape()[1];
    if n == 0 || d == 0 {
        return Err(Error::invalid("pseudo_inverse", "empty matrix"));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite {
            op: "pseudo_inverse".into(),
        });
    }
    let svd = jacobi_svd(a);
    let thresh = rank_threshold(&svd.sigma, n, d);
    let mut out = vec![F::zero(); d * n];
    for j in 0..d {
        if svd.sigma[j] <= thresh || svd.sigma[j] == F::zero() {
            continue;
        }
        let inv_s2 = F::one() / (svd.sigma[j] * svd.sigma[j]);
        // A+ = sum_j (1/sigma_j^2) V_j W_j^T
        for r in 0..d {
            let vr = svd.v[j][r] * inv_s2;
            for c in 0..n {
                out[r * n + c] += vr * svd.w[j][c];
            }
        }
    }
    Tensor::new(vec![d, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul_nn_acc;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_nn_acc(&mut out, a.data(), b.data(), m, k, n);
        Tensor::new(vec![m, n], out).unwrap()
    }

    fn frob(a: &Tensor<f64>) -> f64 {
        a.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn recovers_planted_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::randn(&mut rng, &[64, 8], 1.0);
        let x_true = Tensor::<f64>::randn(&mut rng, &[8, 4], 1.0);
        let b = mul(&a, &x_true);
        let r = least_squares_solve(&a, &b).unwrap();
        assert_eq!(r.rank, 8);
        assert!(!r.rank_deficient);
        assert!(r.solution.max_abs_diff(&x_true) < 1e-6);
    }

    #[test]
    fn identity_system_returns_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Tensor::<f64>::randn(&mut rng, &[5, 3], 1.0);
        let r = least_squares_solve(&Tensor::eye(5), &b).unwrap();
        assert_eq!(r.solution, b);
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::randn(&mut rng, &[10, 4], 1.0);
        let r = least_squares_solve(&a, &Tensor::zeros(&[10, 2])).unwrap();
        assert!(r.solution.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_column_takes_minimum_norm() {
        // A = [a | a], B = a: every (t, 1-t) solves it; minimum norm is
        // (0.5, 0.5).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let col = Tensor::<f64>::randn(&mut rng, &[6, 1], 1.0);
        let mut a = Vec::new();
        for i in 0..6 {
            a.push(col.data()[i]);
            a.push(col.data()[i]);
        }
        let a = Tensor::new(vec![6, 2], a).unwrap();
        let r = least_squares_solve(&a, &col).unwrap();
        assert_eq!(r.rank, 1);
        assert!(r.rank_deficient);
        assert!((r.solution.data()[0] - 0.5).abs() < 1e-10);
        assert!((r.solution.data()[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn overdetermined_residual_is_minimal_under_perturbation() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::randn(&mut rng, &[12, 5], 1.0);
            let b = Tensor::<f64>::randn(&mut rng, &[12, 3], 1.0);
            let x = least_squares_solve(&a, &b).unwrap().solution;
            let base = {
                let ax = mul(&a, &x);
                let diff = Tensor::new(
                    vec![12, 3],
                    ax.data().iter().zip(b.data()).map(|(p, q)| p - q).collect(),
                )
                .unwrap();
                frob(&diff)
            };
            for trial in 0..5 {
                let mut prng = ChaCha8Rng::seed_from_u64(seed * 100 + trial);
                let e = Tensor::<f64>::randn(&mut prng, &[5, 3], 1.0);
                let xe = Tensor::new(
                    vec![5, 3],
                    x.data()
                        .iter()
                        .zip(e.data())
                        .map(|(v, p)| v + 1e-3 * p)
                        .collect(),
                )
                .unwrap();
                let axe = mul(&a, &xe);
                let diff = Tensor::new(
                    vec![12, 3],
                    axe.data().iter().zip(b.data()).map(|(p, q)| p - q).collect(),
                )
                .unwrap();
                assert!(frob(&diff) >= base - 1e-12, "seed {} trial {}", seed, trial);
            }
        }
    }

    #[test]
    fn pseudo_inverse_satisfies_moore_penrose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::randn(&mut rng, &[9, 4], 1.0);
        let pinv = pseudo_inverse(&a).unwrap();
        // A A+ A = A
        let apa = mul(&mul(&a, &pinv), &a);
        assert!(apa.max_abs_diff(&a) < 1e-10);
        // A+ A A+ = A+
        let pap = mul(&mul(&pinv, &a), &pinv);
        assert!(pap.max_abs_diff(&pinv) < 1e-10);
    }

    #[test]
    fn row_count_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros(&[4, 2]);
        let b = Tensor::<f64>::zeros(&[5, 2]);
        assert!(least_squares_solve(&a, &b).is_err());
    }

    #[test]
    fn solve_is_bitwise_reproducible() {
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let a1 = Tensor::<f64>::randn(&mut r1, &[20, 6], 1.0);
        let b1 = Tensor::<f64>::randn(&mut r1, &[20, 2], 1.0);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let a2 = Tensor::<f64>::randn(&mut r2, &[20, 6], 1.0);
        let b2 = Tensor::<f64>::randn(&mut r2, &[20, 2], 1.0);
        let x1 = least_squares_solve(&a1, &b1).unwrap().solution;
        let x2 = least_squares_solve(&a2, &b2).unwrap().solution;
        assert_eq!(x1, x2);
    }
}

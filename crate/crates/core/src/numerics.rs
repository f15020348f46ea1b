//! Dense linear algebra helpers: Cholesky factorization and SPD solves.
//!
//! Matrices are `ndarray` row-major `Array2<f64>`; vectors are `Array1<f64>`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

/// Relative tolerance used for the symmetry precondition.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Relative diagonal jitter applied (once) when a factorization fails.
pub const JITTER_SCALE: f64 = 1e-10;

fn check_square_finite(a: &ArrayView2<f64>) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::ShapeMismatch(format!(
            "expected a square matrix, got {r}x{c}"
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("matrix has non-finite entries".into()));
    }
    Ok(r)
}

fn check_symmetric(a: &ArrayView2<f64>) -> Result<()> {
    let n = a.nrows();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs() / scale);
        }
    }
    if worst > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(worst));
    }
    Ok(())
}

fn cholesky_raw(a: &ArrayView2<f64>) -> Result<Matrix> {
    let n = a.nrows();
    let mut l = Matrix::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::NotSpd { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(l)
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
///
/// Fails with [`Error::NotSpd`] on a non-positive pivot. No jitter is applied;
/// see [`cholesky_jittered`] for the retrying variant.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let view = a.view();
    check_square_finite(&view)?;
    check_symmetric(&view)?;
    cholesky_raw(&view)
}

/// Cholesky with a single retry after adding `1e-10 · trace(A)/n` to the diagonal.
///
/// Returns the factor and the jitter that was applied (zero when none was needed).
pub fn cholesky_jittered(a: &Matrix) -> Result<(Matrix, f64)> {
    match cholesky(a) {
        Ok(l) => Ok((l, 0.0)),
        Err(Error::NotSpd { .. }) => {
            let n = a.nrows();
            let jitter = JITTER_SCALE * a.diag().sum() / n as f64;
            let mut b = a.clone();
            for i in 0..n {
                b[[i, i]] += jitter;
            }
            log::debug!("cholesky retry with jitter {jitter:e}");
            cholesky_raw(&b.view()).map(|l| (l, jitter))
        }
        Err(e) => Err(e),
    }
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn forward_substitute(l: &Matrix, b: ArrayView1<f64>) -> Vector {
    let n = l.nrows();
    let mut y = Vector::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Solves `Lᵀ x = y` for lower-triangular `L`.
pub fn back_substitute_transposed(l: &Matrix, y: ArrayView1<f64>) -> Vector {
    let n = l.nrows();
    let mut x = Vector::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `A x = b` for SPD `A` through its Cholesky factor.
pub fn solve_spd(a: &Matrix, b: &Vector) -> Result<Vector> {
    if a.nrows() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "solve_spd: matrix is {}x{}, rhs has length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let (l, _) = cholesky_jittered(a)?;
    Ok(solve_with_factor(&l, b))
}

pub fn solve_with_factor(l: &Matrix, b: &Vector) -> Vector {
    let y = forward_substitute(l, b.view());
    back_substitute_transposed(l, y.view())
}

/// Solves `A X = B` column by column with a shared factorization.
pub fn solve_spd_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let (l, _) = cholesky_jittered(a)?;
    let mut x = Matrix::zeros(b.dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        let y = forward_substitute(&l, col);
        x.column_mut(j).assign(&back_substitute_transposed(&l, y.view()));
    }
    Ok(x)
}

/// Inverse of an SPD matrix.
pub fn inverse_spd(a: &Matrix) -> Result<Matrix> {
    solve_spd_matrix(a, &Matrix::eye(a.nrows()))
}

pub fn frobenius(a: &Matrix) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn norm2(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use ndarray::array;

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, 0);
        let b = Matrix::from_shape_fn((n, n), |_| rng.normal());
        let mut a = b.t().dot(&b);
        for i in 0..n {
            a[[i, i]] += n as f64;
        }
        a
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&Matrix::eye(3)).unwrap();
        assert_eq!(l, Matrix::eye(3));
    }

    #[test]
    fn cholesky_two_by_two_reproduces_input() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky(&a).unwrap();
        assert_eq!(l[[0, 1]], 0.0);
        let back = l.dot(&l.t());
        assert!(frobenius(&(&back - &a)) / frobenius(&a) < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(cholesky(&a), Err(Error::NotSpd { .. })));
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let a = array![[1.0, 0.5], [0.0, 1.0]];
        assert!(matches!(cholesky(&a), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn jitter_rescues_rank_deficient_psd() {
        let v = array![1.0, 1.0, 1.0];
        let a = Matrix::from_shape_fn((3, 3), |(i, j)| v[i] * v[j]);
        assert!(cholesky(&a).is_err());
        let (_, jitter) = cholesky_jittered(&a).unwrap();
        assert!(jitter > 0.0);
    }

    #[test]
    fn solve_identity_and_scaled() {
        let x = solve_spd(&Matrix::eye(3), &array![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, array![1.0, 2.0, 3.0]);
        let x = solve_spd(&(Matrix::eye(2) * 2.0), &array![2.0, 4.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn solve_rejects_bad_rhs() {
        assert!(matches!(
            solve_spd(&Matrix::eye(3), &array![1.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn randomized_factor_and_residual_bounds() {
        for (seed, n) in [(1u64, 10usize), (2, 50), (3, 200)] {
            let a = random_spd(n, seed);
            let l = cholesky(&a).unwrap();
            let rel = frobenius(&(l.dot(&l.t()) - &a)) / frobenius(&a);
            assert!(rel <= 1e-10, "n={n}: {rel:e}");

            let mut rng = RngStream::new(seed, 1);
            let b = Vector::from_shape_fn(n, |_| rng.normal());
            let x = solve_spd(&a, &b).unwrap();
            let res = norm2((a.dot(&x) - &b).view()) / norm2(b.view());
            assert!(res <= 1e-9, "n={n}: {res:e}");
        }
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = random_spd(8, 9);
        let inv = inverse_spd(&a).unwrap();
        let err = frobenius(&(a.dot(&inv) - Matrix::eye(8)));
        assert!(err < 1e-10);
    }
}

//! Small dense linear algebra on ndarray matrices: symmetric eigenpairs and
//! determinants.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 1000;

/// Eigenpairs of a symmetric matrix, eigenvalues descending, eigenvectors in
/// columns with the largest-magnitude entry of each column made positive.
#[derive(Clone, Debug, PartialEq)]
pub struct SymEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

/// Symmetric eigendecomposition (Householder tridiagonalisation and
/// implicit QR). The input is symmetrised first.
pub fn sym_eigen(a: &Array2<f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("eigen input is {}x{}", n, a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigen input".into()));
    }
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]));
    let eig = m
        .try_symmetric_eigen(f64::EPSILON, MAX_ITERATIONS)
        .ok_or_else(|| Error::EigenNoConvergence {
            sweeps: MAX_ITERATIONS,
            matrix: format!("{a:?}"),
        })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (k, &i) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(i);
        let mut pivot = 0;
        for r in 1..n {
            if col[r].abs() > col[pivot].abs() + 1e-12 {
                pivot = r;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[[r, k]] = sign * col[r];
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Determinant by LU factorisation with partial pivoting. The empty matrix has determinant 1.
pub fn determinant(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "determinant of a non-square matrix");
    if n == 0 {
        return 1.0;
    }
    DMatrix::from_fn(n, n, |i, j| a[[i, j]]).determinant()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_input() {
        let e = sym_eigen(&array![[1.0, 0.0], [0.0, 3.0]]).unwrap();
        assert_eq!(e.values, array![3.0, 1.0]);
        assert_eq!(e.vectors, array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn two_by_two_characteristic_polynomial() {
        // λ² − 4λ + 3 = 0 → λ ∈ {3, 1}; v₁ = (1,1)/√2
        let e = sym_eigen(&array![[2.0, 1.0], [1.0, 2.0]]).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors[[0, 0]] - r).abs() < 1e-14);
        assert!((e.vectors[[1, 0]] - r).abs() < 1e-14);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..9 {
            let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
            let a = &b + &b.t();
            let e = sym_eigen(&a).unwrap();
            let recon = e.vectors.dot(&Array2::from_diag(&e.values)).dot(&e.vectors.t());
            let err = (&recon - &a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10, "n={n} err={err}");
            let gram = e.vectors.t().dot(&e.vectors);
            let orth = (&gram - &Array2::<f64>::eye(n))
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(orth < 1e-10);
            for w in e.values.windows(2) {
                assert!(w[0] >= w[1]);
            }
            for k in 0..n {
                let col = e.vectors.column(k);
                let big = col
                    .iter()
                    .cloned()
                    .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
                assert!(big > 0.0);
            }
        }
    }

    #[test]
    fn determinant_matches_cofactor_expansion() {
        let a = array![[2.0, -1.0, 0.5], [1.0, 3.0, 2.0], [0.0, 1.0, 4.0]];
        let cof = 2.0 * (3.0 * 4.0 - 2.0 * 1.0) - -(1.0 * 4.0 - 2.0 * 0.0) + 0.5 * (1.0 * 1.0 - 3.0 * 0.0);
        assert!((determinant(&a) - cof).abs() < 1e-12);
        assert_eq!(determinant(&Array2::zeros((0, 0))), 1.0);
    }
}

//! Spectra of reversible (and magnetic) diffusion operators.
//!
//! A row-stochastic `P` in detailed balance with `pi` is similar to the
//! symmetric matrix `diag(pi)^1/2 P diag(pi)^-1/2`; with antisymmetric
//! phases attached the same conjugation gives a Hermitian matrix. Both are
//! diagonalized densely and the eigenvectors mapped back to right
//! (`diag(pi)^-1/2 v`) and left (`diag(pi)^1/2 v`) eigenvectors of `P`.

use nalgebra::{Complex, ComplexField, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::normalize::{validate_marginal, StochasticOperator};
use crate::operators::ComplexOperator;

/// Detailed balance must hold to this before conjugating.
pub const DETAILED_BALANCE_TOL: f64 = 1e-8;

/// Adjacent eigenvalues closer than this are flagged as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition<T: nalgebra::Scalar> {
    /// Sorted in descending order.
    pub eigenvalues: DVector<f64>,
    /// Column `k` is the right eigenvector for `eigenvalues[k]`.
    pub right_vectors: DMatrix<T>,
    pub left_vectors: DMatrix<T>,
    /// Some eigenvalue is repeated; vectors inside such a block are in
    /// solver order.
    pub degenerate: bool,
}

impl<T: nalgebra::Scalar> SpectralDecomposition<T> {
    pub fn is_complex(&self) -> bool {
        std::any::TypeId::of::<T>() == std::any::TypeId::of::<Complex<f64>>()
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Diffusion coordinates: column `c` is `lambda_{c+1}^t psi_{c+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T: nalgebra::Scalar> {
    pub coordinates: DMatrix<T>,
    pub time: f64,
    pub retained: usize,
}

fn check_detailed_balance(p: &DMatrix<f64>, pi: &DVector<f64>) -> Result<()> {
    let n = p.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((pi[i] * p[(i, j)] - pi[j] * p[(j, i)]).abs());
        }
    }
    if worst <= DETAILED_BALANCE_TOL {
        Ok(())
    } else {
        Err(Error::DetailedBalance(worst))
    }
}

fn check_pi(pi: &DVector<f64>, n: usize) -> Result<()> {
    let s = pi.sum();
    validate_marginal("pi", &(pi / s), n)?;
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidMarginal(format!("pi sums to {s}")));
    }
    Ok(())
}

/// `diag(pi)^1/2 P diag(pi)^-1/2` for a reversible pair `(P, pi)`.
pub fn conjugate_symmetrize(
    p_plus: &StochasticOperator,
    pi: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = p_plus.len();
    check_pi(pi, n)?;
    check_detailed_balance(p_plus.values(), pi)?;
    let sq = pi.map(f64::sqrt);
    Ok(DMatrix::from_fn(n, n, |i, j| sq[i] * p_plus.values()[(i, j)] / sq[j]))
}

/// `diag(pi)^1/2 P~ diag(pi)^-1/2`; Hermitian when the magnitudes are
/// reversible with respect to `pi` and the phases are antisymmetric.
pub fn conjugate_hermitize(
    op: &ComplexOperator,
    pi: &DVector<f64>,
) -> Result<DMatrix<Complex<f64>>> {
    let n = op.len();
    check_pi(pi, n)?;
    check_detailed_balance(op.magnitudes().values(), pi)?;
    let sq = pi.map(f64::sqrt);
    Ok(DMatrix::from_fn(n, n, |i, j| op.entry(i, j) * (sq[i] / sq[j])))
}

/// Decomposes a real symmetric conjugate produced by
/// [`conjugate_symmetrize`].
pub fn decompose(sym: &DMatrix<f64>, pi: &DVector<f64>) -> Result<SpectralDecomposition<f64>> {
    decompose_generic(sym, pi)
}

/// Decomposes a Hermitian conjugate produced by [`conjugate_hermitize`].
pub fn decompose_hermitian(
    h: &DMatrix<Complex<f64>>,
    pi: &DVector<f64>,
) -> Result<SpectralDecomposition<Complex<f64>>> {
    decompose_generic(h, pi)
}

fn decompose_generic<T>(m: &DMatrix<T>, pi: &DVector<f64>) -> Result<SpectralDecomposition<T>>
where
    T: ComplexField<RealField = f64> + Copy,
{
    if !m.is_square() {
        return Err(Error::NotSquare {
            context: "spectral decomposition",
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let n = m.nrows();
    check_pi(pi, n)?;
    // Solver reads one triangle; average both so rounding-level asymmetry
    // is split evenly.
    let herm = (m + m.adjoint()).map(|v| v * T::from_real(0.5));
    let eig = SymmetricEigen::try_new(herm, f64::EPSILON, 10_000 * n.max(1))
        .ok_or(Error::EigenFailure)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let degenerate = eigenvalues
        .as_slice()
        .windows(2)
        .any(|w| (w[0] - w[1]).abs() < DEGENERACY_TOL);

    let mut vectors = DMatrix::from_fn(n, n, |i, c| eig.eigenvectors[(i, order[c])]);
    for mut col in vectors.column_iter_mut() {
        let scale = col.iter().map(|v| v.modulus()).fold(0.0, f64::max);
        if let Some(first) = col.iter().copied().find(|v| v.modulus() > 1e-10 * scale) {
            // rotate so the first significant component is real positive
            let phase = first.conjugate() * T::from_real(1.0 / first.modulus());
            col *= phase;
        }
    }
    let sq = pi.map(f64::sqrt);
    let right_vectors =
        DMatrix::from_fn(n, n, |i, c| vectors[(i, c)] * T::from_real(1.0 / sq[i]));
    let left_vectors = DMatrix::from_fn(n, n, |i, c| vectors[(i, c)] * T::from_real(sq[i]));
    Ok(SpectralDecomposition {
        eigenvalues,
        right_vectors,
        left_vectors,
        degenerate,
    })
}

fn eigen_power(lambda: f64, t: f64) -> Result<f64> {
    if t == t.trunc() && t.abs() <= i32::MAX as f64 {
        Ok(lambda.powi(t as i32))
    } else if lambda >= 0.0 {
        Ok(lambda.powf(t))
    } else {
        Err(Error::InvalidInput(format!(
            "fractional diffusion time {t} with negative eigenvalue {lambda}"
        )))
    }
}

/// Diffusion coordinates at time `t`, skipping the trivial top eigenpair.
pub fn diffusion_embedding<T>(
    dec: &SpectralDecomposition<T>,
    t: f64,
    k: usize,
) -> Result<Embedding<T>>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let n = dec.len();
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "diffusion time must be nonnegative, got {t}"
        )));
    }
    if k + 1 > n {
        return Err(Error::InvalidInput(format!(
            "cannot retain {k} coordinates from {n} eigenpairs"
        )));
    }
    let mut coordinates = DMatrix::from_element(n, k, T::zero());
    for c in 0..k {
        let w = eigen_power(dec.eigenvalues[c + 1], t)?;
        for i in 0..n {
            coordinates[(i, c)] = dec.right_vectors[(i, c + 1)] * T::from_real(w);
        }
    }
    Ok(Embedding {
        coordinates,
        time: t,
        retained: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::Stochasticity;
    use crate::operators::{dmap, magnetic_operator};
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn uniform_operator_spectrum() {
        let n = 4;
        let p = StochasticOperator::new(
            DMatrix::from_element(n, n, 0.25),
            Stochasticity::Bi,
            1e-15,
        )
        .unwrap();
        let pi = DVector::from_element(n, 0.25);
        let s = conjugate_symmetrize(&p, &pi).unwrap();
        assert_eq!(&s, p.values());
        let dec = decompose(&s, &pi).unwrap();
        assert_abs_diff_eq!(dec.eigenvalues[0], 1.0, epsilon = 1e-12);
        for k in 1..n {
            assert_abs_diff_eq!(dec.eigenvalues[k], 0.0, epsilon = 1e-12);
        }
        assert!(dec.degenerate);
        assert!(!dec.is_complex());
    }

    #[test]
    fn two_point_spectrum() {
        let p = dmap(&dmatrix![0.0, 1.0; 1.0, 0.0], 1.0).unwrap();
        let pi = dvector![0.5, 0.5];
        let dec = decompose(&conjugate_symmetrize(&p, &pi).unwrap(), &pi).unwrap();
        let e = (-1f64).exp();
        assert_abs_diff_eq!(dec.eigenvalues[1], (1.0 - e) / (1.0 + e), epsilon = 1e-12);
        assert_abs_diff_eq!(dec.right_vectors[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dec.right_vectors[(1, 0)], 1.0, epsilon = 1e-12);
        assert!(dec.right_vectors[(0, 1)] > 0.0);
    }

    #[test]
    fn nonreversible_pair_rejected() {
        let p = StochasticOperator::new(
            dmatrix![0.0, 1.0, 0.0; 0.0, 0.0, 1.0; 1.0, 0.0, 0.0],
            Stochasticity::Bi,
            0.0,
        )
        .unwrap();
        let pi = DVector::from_element(3, 1.0 / 3.0);
        assert!(matches!(conjugate_symmetrize(&p, &pi), Err(Error::DetailedBalance(_))));
    }

    #[test]
    fn hermitian_two_node() {
        let p = dmap(&dmatrix![0.0, 1.0; 1.0, 0.0], 1.0).unwrap();
        let phi = 0.7;
        let op = magnetic_operator(&p, &dmatrix![0.0, phi; -phi, 0.0]).unwrap();
        let pi = dvector![0.5, 0.5];
        let h = conjugate_hermitize(&op, &pi).unwrap();
        assert_abs_diff_eq!(h[(0, 1)].re, h[(1, 0)].re, epsilon = 1e-16);
        assert_abs_diff_eq!(h[(0, 1)].im, -h[(1, 0)].im, epsilon = 1e-16);
        let dec = decompose_hermitian(&h, &pi).unwrap();
        assert!(dec.is_complex());
        // 2x2 Hermitian [[s, c e^{i phi}], [c e^{-i phi}, s]] has s +- c
        let s = p.values()[(0, 0)];
        let c = p.values()[(0, 1)];
        assert_abs_diff_eq!(dec.eigenvalues[0], s + c, epsilon = 1e-12);
        assert_abs_diff_eq!(dec.eigenvalues[1], s - c, epsilon = 1e-12);
        let first = dec.right_vectors[(0, 0)];
        assert!(first.im.abs() < 1e-15 && first.re > 0.0);
    }

    #[test]
    fn embedding_time_scaling_and_range() {
        let d2 = dmatrix![0.0, 1.0, 4.0; 1.0, 0.0, 1.0; 4.0, 1.0, 0.0];
        let p = dmap(&d2, 0.5).unwrap();
        let pi = crate::bridges::dmap_stationary(&d2, 0.5).unwrap();
        let dec = decompose(&conjugate_symmetrize(&p, &pi).unwrap(), &pi).unwrap();
        let e0 = diffusion_embedding(&dec, 0.0, 2).unwrap();
        for c in 0..2 {
            for i in 0..3 {
                assert_eq!(e0.coordinates[(i, c)], dec.right_vectors[(i, c + 1)]);
            }
        }
        let e1 = diffusion_embedding(&dec, 1.0, 2).unwrap();
        let e2 = diffusion_embedding(&dec, 2.0, 2).unwrap();
        for c in 0..2 {
            let lam = dec.eigenvalues[c + 1];
            for i in 0..3 {
                assert_abs_diff_eq!(e2.coordinates[(i, c)], lam * e1.coordinates[(i, c)], epsilon = 1e-15);
            }
        }
        assert!(diffusion_embedding(&dec, 1.0, 3).is_err());
        assert!(diffusion_embedding(&dec, -1.0, 1).is_err());
    }
}

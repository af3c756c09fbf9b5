//! Kernels and Markov operators built on a bidivergence or on `D^2`.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{ensure_positive_beta, Bidivergence};
use crate::normalize::{
    sinkhorn, sinkhorn_symmetric, softmax_cols, softmax_rows, StochasticOperator, Stochasticity,
};

/// Phases are accepted as antisymmetric up to this absolute violation.
pub const ANTISYMMETRY_TOL: f64 = 1e-12;

/// A strictly positive kernel together with the inverse temperature that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
    pub beta: f64,
}

/// Combinatorial and random-walk Laplacians of a positive kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianPair {
    /// `diag(z) - P`.
    pub combinatorial: DMatrix<f64>,
    /// `I - diag(1/z) P`.
    pub random_walk: DMatrix<f64>,
    /// Row sums `z` of the kernel.
    pub degrees: DVector<f64>,
}

/// Which divergence a directional operator is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// A row-stochastic magnitude part with antisymmetric phases,
/// `P[i][j] * exp(i * theta[i][j])`.
///
/// Storing polar parts keeps `|entry| == magnitude` exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexOperator {
    magnitudes: StochasticOperator,
    phases: DMatrix<f64>,
}

impl ComplexOperator {
    pub fn magnitudes(&self) -> &StochasticOperator {
        &self.magnitudes
    }

    pub fn phases(&self) -> &DMatrix<f64> {
        &self.phases
    }

    pub fn len(&self) -> usize {
        self.phases.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex<f64> {
        Complex::from_polar(self.magnitudes.values()[(i, j)], self.phases[(i, j)])
    }

    /// Rectangular form of the operator.
    pub fn to_complex(&self) -> DMatrix<Complex<f64>> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| self.entry(i, j))
    }
}

/// Gaussian kernel `exp(-beta * D^2)`.
pub fn rbf_kernel(d2: &DMatrix<f64>, beta: f64) -> Result<KernelMatrix> {
    ensure_positive_beta(beta)?;
    ensure_square("rbf kernel", d2)?;
    Ok(KernelMatrix {
        values: d2.map(|v| (-beta * v).exp()),
        beta,
    })
}

/// `(exp(-beta * fwd), exp(-beta * bwd))`, whose Hadamard product is the
/// Gaussian kernel.
pub fn directional_kernels(
    bidiv: &Bidivergence,
    beta: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    ensure_positive_beta(beta)?;
    Ok((
        bidiv.fwd.map(|v| (-beta * v).exp()),
        bidiv.bwd.map(|v| (-beta * v).exp()),
    ))
}

/// Query-to-key attention: `softmax_rows(-beta * fwd)`.
pub fn attention_forward(bidiv: &Bidivergence, beta: f64) -> Result<StochasticOperator> {
    ensure_positive_beta(beta)?;
    Ok(softmax_rows(&(&bidiv.fwd * -beta)))
}

/// Key-to-query attention: `softmax_cols(-beta * bwd)`.
pub fn attention_backward(bidiv: &Bidivergence, beta: f64) -> Result<StochasticOperator> {
    ensure_positive_beta(beta)?;
    Ok(softmax_cols(&(&bidiv.bwd * -beta)))
}

/// Sinkhorn-normalized attention on one of the two divergences. The forward
/// and backward results are in general unrelated.
pub fn attention_bistochastic(
    bidiv: &Bidivergence,
    beta: f64,
    direction: Direction,
    tol: f64,
    max_iter: usize,
) -> Result<StochasticOperator> {
    ensure_positive_beta(beta)?;
    let d = match direction {
        Direction::Forward => &bidiv.fwd,
        Direction::Backward => &bidiv.bwd,
    };
    sinkhorn(&(d * -beta), tol, max_iter).map(|(op, _)| op)
}

/// Diffusion-map operator `softmax_rows(-beta * D^2)`.
pub fn dmap(d2: &DMatrix<f64>, beta: f64) -> Result<StochasticOperator> {
    ensure_positive_beta(beta)?;
    ensure_square("dmap", d2)?;
    Ok(softmax_rows(&(d2 * -beta)))
}

/// Diffusion-map operator by degree normalization, `diag(1/z) P`.
pub fn dmap_by_degree(d2: &DMatrix<f64>, beta: f64) -> Result<StochasticOperator> {
    let mut p = rbf_kernel(d2, beta)?.values;
    for mut row in p.row_iter_mut() {
        let z = row.sum();
        row /= z;
    }
    Ok(StochasticOperator::from_parts(p, Stochasticity::Row))
}

pub fn laplacians(kernel: &KernelMatrix) -> Result<LaplacianPair> {
    let p = &kernel.values;
    ensure_square("laplacian", p)?;
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "laplacians need a strictly positive kernel, found {v}"
        )));
    }
    let n = p.nrows();
    let degrees = DVector::from_iterator(n, p.row_iter().map(|r| r.sum()));
    let mut combinatorial = -p.clone();
    let mut random_walk = DMatrix::zeros(n, n);
    for i in 0..n {
        combinatorial[(i, i)] += degrees[i];
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            random_walk[(i, j)] = delta - p[(i, j)] / degrees[i];
        }
    }
    Ok(LaplacianPair {
        combinatorial,
        random_walk,
        degrees,
    })
}

/// Bistochastic diffusion operator `Sinkhorn(-beta * D^2)`.
///
/// Exactly symmetric input goes through the symmetric scaling, so the
/// output is symmetric bit for bit.
pub fn dmap_bistochastic(
    d2: &DMatrix<f64>,
    beta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<StochasticOperator> {
    ensure_positive_beta(beta)?;
    ensure_square("bistochastic dmap", d2)?;
    let z = d2 * -beta;
    let result = if z == z.transpose() {
        sinkhorn_symmetric(&z, tol, max_iter)?
    } else {
        sinkhorn(&z, tol, max_iter)?
    };
    Ok(result.0)
}

/// Attaches phases to a row-stochastic operator.
pub fn magnetic_operator(
    p_plus: &StochasticOperator,
    theta: &DMatrix<f64>,
) -> Result<ComplexOperator> {
    if p_plus.values().shape() != theta.shape() {
        return Err(Error::DimensionMismatch {
            context: "magnetic phases",
            expected: p_plus.values().shape(),
            found: theta.shape(),
        });
    }
    let violation = antisymmetry_violation(theta);
    if violation.is_nan() || violation > ANTISYMMETRY_TOL {
        return Err(Error::NotAntisymmetric(violation));
    }
    Ok(ComplexOperator {
        magnitudes: p_plus.clone(),
        phases: theta.clone(),
    })
}

/// `max |m + m^T|`.
pub fn antisymmetry_violation(m: &DMatrix<f64>) -> f64 {
    (m + m.transpose()).amax()
}

fn ensure_square(context: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::NotSquare {
            context,
            rows: m.nrows(),
            cols: m.ncols(),
        })
    }
}

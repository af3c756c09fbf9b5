//! Softmax, product-of-experts, Sinkhorn and Schrodinger scaling.
//!
//! All iterative scalings run on log-potentials with log-sum-exp
//! reductions; `beta * D^2` can span hundreds of nats and plain-domain
//! scaling underflows long before that.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Default L-infinity marginal tolerance for the scaling solvers.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default iteration cap for the scaling solvers.
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Marginals passed to the bridge solvers must sum to one within this.
pub const MARGINAL_SUM_TOL: f64 = 1e-12;

/// Which axes of a nonnegative matrix sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stochasticity {
    Row,
    Column,
    Bi,
}

/// A nonnegative square matrix tagged with its normalization axis.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticOperator {
    values: DMatrix<f64>,
    kind: Stochasticity,
}

impl StochasticOperator {
    /// Validates nonnegativity and the declared marginals against `tol`.
    pub fn new(values: DMatrix<f64>, kind: Stochasticity, tol: f64) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::NotSquare {
                context: "stochastic operator",
                rows: values.nrows(),
                cols: values.ncols(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "stochastic operator has a negative or non-finite entry ({v})"
            )));
        }
        let op = Self { values, kind };
        let residual = op.residual();
        if residual > tol {
            return Err(Error::InvalidInput(format!(
                "{kind:?}-stochastic marginal violation {residual:e} exceeds {tol:e}"
            )));
        }
        Ok(op)
    }

    pub(crate) fn from_parts(values: DMatrix<f64>, kind: Stochasticity) -> Self {
        Self { values, kind }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn kind(&self) -> Stochasticity {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `max_i |sum_j p_ij - 1|`.
    pub fn row_residual(&self) -> f64 {
        self.values
            .row_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `max_j |sum_i p_ij - 1|`.
    pub fn column_residual(&self) -> f64 {
        self.values
            .column_iter()
            .map(|c| (c.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Marginal violation along the declared axes.
    pub fn residual(&self) -> f64 {
        match self.kind {
            Stochasticity::Row => self.row_residual(),
            Stochasticity::Column => self.column_residual(),
            Stochasticity::Bi => self.row_residual().max(self.column_residual()),
        }
    }
}

/// Positive scaling vectors with their logs and solver metadata.
///
/// The scalar gauge is fixed so that `u` has unit geometric mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPotentials {
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub log_u: DVector<f64>,
    pub log_v: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl ScalingPotentials {
    fn from_logs(mut log_u: DVector<f64>, mut log_v: DVector<f64>, iterations: usize) -> Self {
        let g = log_u.mean();
        log_u.add_scalar_mut(-g);
        log_v.add_scalar_mut(g);
        Self {
            u: log_u.map(f64::exp),
            v: log_v.map(f64::exp),
            log_u,
            log_v,
            iterations,
            residual: 0.0,
        }
    }
}

/// `log sum_k exp(x_k)`, or `-inf` for an empty input.
pub fn logsumexp<I: IntoIterator<Item = f64> + Clone>(xs: I) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Row-wise softmax (normalizes over `j`). Entries must be finite.
pub fn softmax_rows(z: &DMatrix<f64>) -> StochasticOperator {
    let (n, m) = z.shape();
    let mut out = z.clone();
    let mut row = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            row[j] = z[(i, j)];
        }
        softmax_in_place(&mut row);
        for j in 0..m {
            out[(i, j)] = row[j];
        }
    }
    StochasticOperator::from_parts(out, Stochasticity::Row)
}

/// Column-wise softmax (normalizes over `i`). Entries must be finite.
pub fn softmax_cols(z: &DMatrix<f64>) -> StochasticOperator {
    let mut out = z.clone();
    for mut col in out.column_iter_mut() {
        softmax_in_place(col.as_mut_slice());
    }
    StochasticOperator::from_parts(out, Stochasticity::Column)
}

/// Normalized Hadamard product of two experts with the same stochastic axis.
pub fn poe_combine(a: &StochasticOperator, b: &StochasticOperator) -> Result<StochasticOperator> {
    poe_combine_with_normalizer(a, b).map(|(op, _)| op)
}

/// As [`poe_combine`], also returning the per-row (or per-column)
/// normalizer `m = (sum a ⊙ b)^-1`.
pub fn poe_combine_with_normalizer(
    a: &StochasticOperator,
    b: &StochasticOperator,
) -> Result<(StochasticOperator, DVector<f64>)> {
    if a.kind != b.kind || a.kind == Stochasticity::Bi {
        return Err(Error::KindMismatch(a.kind, b.kind));
    }
    if a.values.shape() != b.values.shape() {
        return Err(Error::DimensionMismatch {
            context: "product of experts",
            expected: a.values.shape(),
            found: b.values.shape(),
        });
    }
    let mut prod = a.values.component_mul(&b.values);
    let (axis, sums): (&'static str, Vec<f64>) = match a.kind {
        Stochasticity::Row => ("row", prod.row_iter().map(|r| r.sum()).collect()),
        _ => ("column", prod.column_iter().map(|c| c.sum()).collect()),
    };
    if let Some(index) = sums.iter().position(|s| s.is_nan() || *s <= 0.0) {
        return Err(Error::DisjointSupport { axis, index });
    }
    let normalizer = DVector::from_iterator(sums.len(), sums.iter().map(|s| 1.0 / s));
    match a.kind {
        Stochasticity::Row => {
            for (i, mut row) in prod.row_iter_mut().enumerate() {
                row /= sums[i];
            }
        }
        _ => {
            for (j, mut col) in prod.column_iter_mut().enumerate() {
                col /= sums[j];
            }
        }
    }
    Ok((StochasticOperator::from_parts(prod, a.kind), normalizer))
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

/// `exp(z[i][j] + a[i] + b[j])`.
pub fn scaled_exp(z: &DMatrix<f64>, log_u: &DVector<f64>, log_v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| (z[(i, j)] + log_u[i] + log_v[j]).exp())
}

fn marginal_violation(m: &DMatrix<f64>, rows: &DVector<f64>, cols: &DVector<f64>) -> f64 {
    let r = m
        .row_iter()
        .zip(rows.iter())
        .map(|(row, t)| (row.sum() - t).abs())
        .fold(0.0, f64::max);
    let c = m
        .column_iter()
        .zip(cols.iter())
        .map(|(col, t)| (col.sum() - t).abs())
        .fold(0.0, f64::max);
    r.max(c)
}

/// Sinkhorn scaling of `exp(z)` to a bistochastic matrix.
///
/// Alternates column and row normalization on the log-potentials until the
/// L-infinity marginal violation drops to `tol`. The returned matrix is
/// `exp(z[i][j] + log_u[i] + log_v[j])`.
pub fn sinkhorn(
    z: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(StochasticOperator, ScalingPotentials)> {
    ensure_square("sinkhorn", z)?;
    let n = z.nrows();
    let ones = DVector::from_element(n, 1.0);
    let mut log_u = DVector::zeros(n);
    let mut log_v = DVector::zeros(n);
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        for j in 0..n {
            log_v[j] = -logsumexp((0..n).map(|i| z[(i, j)] + log_u[i]));
        }
        for i in 0..n {
            log_u[i] = -logsumexp((0..n).map(|j| z[(i, j)] + log_v[j]));
        }
        residual = marginal_violation(&scaled_exp(z, &log_u, &log_v), &ones, &ones);
        if residual <= tol {
            let mut pot = ScalingPotentials::from_logs(log_u, log_v, iter);
            let values = scaled_exp(z, &pot.log_u, &pot.log_v);
            pot.residual = marginal_violation(&values, &ones, &ones);
            return Ok((StochasticOperator::from_parts(values, Stochasticity::Bi), pot));
        }
    }
    Err(Error::NotConverged {
        solver: "sinkhorn",
        iterations: max_iter,
        residual,
    })
}

/// Sinkhorn scaling for exactly symmetric logits.
///
/// Uses a single potential `w` with `Z = exp(z[i][j] + (w[i] + w[j]))`, so
/// the output is symmetric bit for bit. The fixed point
/// `w = -lse_j(z + w)` is reached by the damped (geometric-mean) update.
pub fn sinkhorn_symmetric(
    z: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(StochasticOperator, ScalingPotentials)> {
    ensure_square("symmetric sinkhorn", z)?;
    let n = z.nrows();
    for i in 0..n {
        for j in 0..i {
            if z[(i, j)] != z[(j, i)] {
                return Err(Error::InvalidInput(
                    "symmetric sinkhorn requires exactly symmetric logits".into(),
                ));
            }
        }
    }
    let ones = DVector::from_element(n, 1.0);
    let assemble =
        |w: &DVector<f64>| DMatrix::from_fn(n, n, |i, j| (z[(i, j)] + (w[i] + w[j])).exp());
    let mut w = DVector::zeros(n);
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        let target = DVector::from_fn(n, |i, _| -logsumexp((0..n).map(|j| z[(i, j)] + w[j])));
        w = (&w + &target) * 0.5;
        let values = assemble(&w);
        residual = marginal_violation(&values, &ones, &ones);
        if residual <= tol {
            let mut pot = ScalingPotentials::from_logs(w.clone(), w, iter);
            pot.residual = residual;
            return Ok((StochasticOperator::from_parts(values, Stochasticity::Bi), pot));
        }
    }
    Err(Error::NotConverged {
        solver: "symmetric sinkhorn",
        iterations: max_iter,
        residual,
    })
}

/// Checks that `mu` is a strictly positive probability vector of length `n`.
pub fn validate_marginal(name: &str, mu: &DVector<f64>, n: usize) -> Result<()> {
    if mu.len() != n {
        return Err(Error::InvalidMarginal(format!(
            "{name} has length {}, expected {n}",
            mu.len()
        )));
    }
    if let Some(i) = mu.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidMarginal(format!(
            "{name}[{i}] = {} is not strictly positive",
            mu[i]
        )));
    }
    let total = mu.sum();
    if (total - 1.0).abs() > MARGINAL_SUM_TOL {
        return Err(Error::InvalidMarginal(format!(
            "{name} sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// Schrodinger potentials for a strictly positive kernel.
///
/// Finds `u+`, `u-` with `u+[i] * sum_j P[i][j] u-[j] = mu+[i]` and
/// `u-[j] * sum_i P[i][j] u+[i] = mu-[j]` by the alternating updates
/// `u+ <- mu+ / (P u-)`, `u- <- mu- / (P^T u+)`.
pub fn schrodinger_solve(
    kernel: &DMatrix<f64>,
    mu_plus: &DVector<f64>,
    mu_minus: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<ScalingPotentials> {
    if let Some(v) = kernel.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "reference kernel must be strictly positive, found {v}"
        )));
    }
    schrodinger_solve_log(&kernel.map(f64::ln), mu_plus, mu_minus, tol, max_iter)
}

/// [`schrodinger_solve`] on a log-kernel, for kernels whose entries would
/// overflow or underflow when exponentiated.
pub fn schrodinger_solve_log(
    log_kernel: &DMatrix<f64>,
    mu_plus: &DVector<f64>,
    mu_minus: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<ScalingPotentials> {
    ensure_square("schrodinger bridge", log_kernel)?;
    let n = log_kernel.nrows();
    validate_marginal("mu_plus", mu_plus, n)?;
    validate_marginal("mu_minus", mu_minus, n)?;
    if log_kernel.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("log-kernel has non-finite entries".into()));
    }
    let log_mu_plus = mu_plus.map(f64::ln);
    let log_mu_minus = mu_minus.map(f64::ln);
    let mut log_u = DVector::zeros(n);
    let mut log_v = DVector::zeros(n);
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        for i in 0..n {
            log_u[i] = log_mu_plus[i] - logsumexp((0..n).map(|j| log_kernel[(i, j)] + log_v[j]));
        }
        residual = marginal_violation(&scaled_exp(log_kernel, &log_u, &log_v), mu_plus, mu_minus);
        if residual <= tol {
            let mut pot = ScalingPotentials::from_logs(log_u, log_v, iter);
            pot.residual = marginal_violation(
                &scaled_exp(log_kernel, &pot.log_u, &pot.log_v),
                mu_plus,
                mu_minus,
            );
            return Ok(pot);
        }
        for j in 0..n {
            log_v[j] = log_mu_minus[j] - logsumexp((0..n).map(|i| log_kernel[(i, j)] + log_u[i]));
        }
    }
    Err(Error::NotConverged {
        solver: "schrodinger iterations",
        iterations: max_iter,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn softmax_rows_examples() {
        let p = softmax_rows(&dmatrix![0.0, 0.0]);
        assert_eq!(p.values(), &dmatrix![0.5, 0.5]);
        let p = softmax_rows(&dmatrix![0.0, 3f64.ln()]);
        assert_abs_diff_eq!(p.values()[(0, 0)], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.values()[(0, 1)], 0.75, epsilon = 1e-15);
        assert_eq!(p.kind(), Stochasticity::Row);
    }

    #[test]
    fn softmax_cols_examples() {
        let p = softmax_cols(&DMatrix::zeros(2, 2));
        assert_eq!(p.values(), &DMatrix::from_element(2, 2, 0.5));
        let z = dmatrix![0.3, -1.0, 2.0; 0.5, 0.1, -0.2; 1.5, 0.0, 0.7];
        let direct = softmax_cols(&z);
        let via_rows = softmax_rows(&z.transpose()).into_values().transpose();
        assert_abs_diff_eq!(direct.values(), &via_rows, epsilon = 1e-15);
        let shifted = DMatrix::from_fn(3, 3, |i, j| z[(i, j)] + [4.0, -2.0, 10.0][j]);
        assert_abs_diff_eq!(softmax_cols(&shifted).values(), direct.values(), epsilon = 1e-15);
    }

    #[test]
    fn poe_neutral_and_idempotent() {
        let a = softmax_rows(&dmatrix![0.2, 1.0, -0.5; 0.0, 0.3, 0.9; 2.0, 0.0, 1.0]);
        let uniform = softmax_rows(&DMatrix::zeros(3, 3));
        let out = poe_combine(&a, &uniform).unwrap();
        assert_abs_diff_eq!(out.values(), a.values(), epsilon = 1e-15);

        let half = softmax_rows(&dmatrix![0.0, 0.0]);
        assert_eq!(poe_combine(&half, &half).unwrap().values(), &dmatrix![0.5, 0.5]);
    }

    #[test]
    fn poe_rejects_mixed_kinds_and_disjoint_support() {
        let r = softmax_rows(&DMatrix::zeros(2, 2));
        let c = softmax_cols(&DMatrix::zeros(2, 2));
        assert!(matches!(poe_combine(&r, &c), Err(Error::KindMismatch(..))));

        let a = StochasticOperator::new(dmatrix![1.0, 0.0; 0.5, 0.5], Stochasticity::Row, 0.0)
            .unwrap();
        let b = StochasticOperator::new(dmatrix![0.0, 1.0; 0.5, 0.5], Stochasticity::Row, 0.0)
            .unwrap();
        assert_eq!(
            poe_combine(&a, &b),
            Err(Error::DisjointSupport { axis: "row", index: 0 })
        );
    }

    #[test]
    fn sinkhorn_uniform_kernel() {
        let (z, pot) = sinkhorn(&DMatrix::zeros(2, 2), 1e-12, 100).unwrap();
        assert_abs_diff_eq!(z.values(), &DMatrix::from_element(2, 2, 0.5), epsilon = 1e-15);
        assert!(pot.residual <= 1e-12);
        assert_abs_diff_eq!(pot.log_u.sum(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn sinkhorn_two_by_two() {
        let z = dmatrix![2f64.ln(), 0.0; 0.0, 2f64.ln()];
        let (out, _) = sinkhorn(&z, 1e-13, 1000).unwrap();
        let expected = dmatrix![2.0 / 3.0, 1.0 / 3.0; 1.0 / 3.0, 2.0 / 3.0];
        assert_abs_diff_eq!(out.values(), &expected, epsilon = 1e-12);
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let z = dmatrix![0.0, 5.0, -3.0; 1.0, 0.0, 2.0; -4.0, 0.5, 0.0];
        match sinkhorn(&z, 1e-14, 1) {
            Err(Error::NotConverged { iterations, residual, .. }) => {
                assert_eq!(iterations, 1);
                assert!(residual > 1e-14 && residual.is_finite());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn symmetric_sinkhorn_is_exactly_symmetric() {
        let z = dmatrix![0.0, -1.0, -4.0; -1.0, 0.0, -2.0; -4.0, -2.0, 0.0];
        let (out, pot) = sinkhorn_symmetric(&z, 1e-12, 10_000).unwrap();
        assert_eq!(out.values(), &out.values().transpose());
        assert!(out.residual() <= 1e-12);
        assert!(pot.residual <= 1e-12);
        let (plain, _) = sinkhorn(&z, 1e-12, 10_000).unwrap();
        assert_abs_diff_eq!(out.values(), plain.values(), epsilon = 1e-10);
        assert!(sinkhorn_symmetric(&dmatrix![0.0, 1.0; 2.0, 0.0], 1e-10, 10).is_err());
    }

    #[test]
    fn schrodinger_flat_kernel_gives_product_coupling() {
        let k = DMatrix::from_element(2, 2, 1.0);
        let mp = dvector![0.75, 0.25];
        let mm = dvector![0.5, 0.5];
        let pot = schrodinger_solve(&k, &mp, &mm, 1e-12, 100).unwrap();
        let pi = scaled_exp(&k.map(f64::ln), &pot.log_u, &pot.log_v);
        let expected = dmatrix![0.375, 0.375; 0.125, 0.125];
        assert_abs_diff_eq!(pi, expected, epsilon = 1e-15);
    }

    #[test]
    fn schrodinger_rejects_bad_marginals() {
        let k = DMatrix::from_element(2, 2, 1.0);
        let ok = dvector![0.5, 0.5];
        assert!(matches!(
            schrodinger_solve(&k, &dvector![1.0, 0.0], &ok, 1e-10, 10),
            Err(Error::InvalidMarginal(_))
        ));
        assert!(matches!(
            schrodinger_solve(&k, &dvector![0.6, 0.6], &ok, 1e-10, 10),
            Err(Error::InvalidMarginal(_))
        ));
        assert!(matches!(
            schrodinger_solve(&k, &ok, &dvector![0.2, 0.3, 0.5], 1e-10, 10),
            Err(Error::InvalidMarginal(_))
        ));
        let bad = dmatrix![1.0, 0.0; 1.0, 1.0];
        assert!(matches!(
            schrodinger_solve(&bad, &ok, &ok, 1e-10, 10),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn logsumexp_handles_large_and_empty_inputs() {
        assert_abs_diff_eq!(logsumexp([1000.0, 1000.0]), 1000.0 + 2f64.ln(), epsilon = 1e-12);
        assert_eq!(logsumexp(std::iter::empty::<f64>()), f64::NEG_INFINITY);
    }

    #[test]
    fn operator_validation() {
        assert!(StochasticOperator::new(dmatrix![0.5, 0.5; 0.2, 0.8], Stochasticity::Row, 1e-12)
            .is_ok());
        assert!(
            StochasticOperator::new(dmatrix![0.5, 0.5; 0.2, 0.8], Stochasticity::Bi, 1e-12)
                .is_err()
        );
        assert!(
            StochasticOperator::new(dmatrix![1.5, -0.5; 0.2, 0.8], Stochasticity::Row, 1e-12)
                .is_err()
        );
    }
}

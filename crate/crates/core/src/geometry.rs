//! Gram matrices, QK bidivergences and squared distances.
//!
//! Everything here starts from a point cloud `R` (N samples by D features)
//! and an optional interaction matrix `W` (D by D). The generalized Gram
//! matrix `G = R W R^T` is split along its diagonal into a pair of signed
//! divergences
//!
//! ```text
//! fwd[i][j] = G[i][i] - G[i][j]
//! bwd[i][j] = G[j][j] - G[j][i]
//! ```
//!
//! whose sum is the (Mahalanobis) squared distance. Both parts vanish on the
//! diagonal and may be negative elsewhere. With this convention
//! `fwd = bwd^T` holds for every Gram matrix, plain or generalized, and a
//! row softmax of `-beta * fwd` reproduces `softmax(beta * Q K^T)`.
//!
//! Products are dense and evaluated with explicit loops so that a symmetric
//! Gram matrix is symmetric bit for bit.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Sample matrix: one row per sample, one column per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCloud {
    points: DMatrix<f64>,
}

impl DataCloud {
    /// Requires at least two samples, at least one feature and finite
    /// entries.
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() < 2 {
            return Err(Error::InvalidInput(format!(
                "a point cloud needs at least 2 samples, found {}",
                points.nrows()
            )));
        }
        if points.ncols() < 1 {
            return Err(Error::InvalidInput(
                "a point cloud needs at least one feature".into(),
            ));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % points.nrows(), pos / points.nrows());
            return Err(Error::InvalidInput(format!(
                "non-finite value at sample {r}, feature {c}"
            )));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// Number of features.
    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// The QK interaction matrix `W` (D by D), possibly asymmetric.
///
/// When built from a query/key factor pair the product `W_Q W_K^T` is
/// materialized and used everywhere; the factors are kept only so callers
/// can form `Q = R W_Q` and `K = R W_K` directly.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionWeights {
    matrix: DMatrix<f64>,
    factors: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl InteractionWeights {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NotSquare {
                context: "interaction weights",
                rows: matrix.nrows(),
                cols: matrix.ncols(),
            });
        }
        ensure_finite("interaction weights", &matrix)?;
        Ok(Self {
            matrix,
            factors: None,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            factors: None,
        }
    }

    /// `W = W_Q W_K^T` from two D by d factors.
    pub fn from_factors(query: DMatrix<f64>, key: DMatrix<f64>) -> Result<Self> {
        if query.shape() != key.shape() {
            return Err(Error::DimensionMismatch {
                context: "query/key factors",
                expected: query.shape(),
                found: key.shape(),
            });
        }
        ensure_finite("query factor", &query)?;
        ensure_finite("key factor", &key)?;
        let d = query.nrows();
        let r = query.ncols();
        let matrix = DMatrix::from_fn(d, d, |x, y| {
            let mut acc = 0.0;
            for k in 0..r {
                acc += query[(x, k)] * key[(y, k)];
            }
            acc
        });
        Ok(Self {
            matrix,
            factors: Some((query, key)),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn factors(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        self.factors.as_ref().map(|(q, k)| (q, k))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `(W + W^T) / 2` as a new weight matrix.
    pub fn symmetrized(&self) -> Self {
        Self {
            matrix: hermitian_partition(self).symmetric,
            factors: None,
        }
    }
}

/// `W = S + A` with `S` symmetric and `A` antisymmetric, i.e. the real and
/// imaginary parts of the Hermitian matrix `V = S + iA`.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianPartition {
    pub symmetric: DMatrix<f64>,
    pub antisymmetric: DMatrix<f64>,
}

impl HermitianPartition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.symmetric + &self.antisymmetric
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramKind {
    /// `R R^T`; symmetric positive semidefinite.
    Plain,
    /// `R W R^T`; no symmetry guarantee.
    Generalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: DMatrix<f64>,
    kind: GramKind,
}

impl GramMatrix {
    /// Wraps an arbitrary square matrix as a generalized Gram matrix.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::NotSquare {
                context: "gram matrix",
                rows: values.nrows(),
                cols: values.ncols(),
            });
        }
        ensure_finite("gram matrix", &values)?;
        Ok(Self {
            values,
            kind: GramKind::Generalized,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn kind(&self) -> GramKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The signed pair `(fwd, bwd)` with `fwd + bwd = D^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bidivergence {
    pub fwd: DMatrix<f64>,
    pub bwd: DMatrix<f64>,
    kind: GramKind,
}

impl Bidivergence {
    /// Builds a bidivergence from explicit parts, e.g. for testing.
    pub fn from_parts(fwd: DMatrix<f64>, bwd: DMatrix<f64>) -> Result<Self> {
        if !fwd.is_square() {
            return Err(Error::NotSquare {
                context: "bidivergence",
                rows: fwd.nrows(),
                cols: fwd.ncols(),
            });
        }
        if fwd.shape() != bwd.shape() {
            return Err(Error::DimensionMismatch {
                context: "bidivergence parts",
                expected: fwd.shape(),
                found: bwd.shape(),
            });
        }
        Ok(Self {
            fwd,
            bwd,
            kind: GramKind::Generalized,
        })
    }

    pub fn len(&self) -> usize {
        self.fwd.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.fwd.is_empty()
    }

    pub fn kind(&self) -> GramKind {
        self.kind
    }
}

/// `G[i][j] = sum_X R[i][X] R[j][X]`.
pub fn gram(cloud: &DataCloud) -> GramMatrix {
    let r = cloud.points();
    let n = r.nrows();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = r.row(i).dot(&r.row(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    GramMatrix {
        values: g,
        kind: GramKind::Plain,
    }
}

/// `R W R^T`.
pub fn generalized_gram(cloud: &DataCloud, weights: &InteractionWeights) -> Result<GramMatrix> {
    if weights.dim() != cloud.dim() {
        return Err(Error::DimensionMismatch {
            context: "interaction weights vs cloud features",
            expected: (cloud.dim(), cloud.dim()),
            found: weights.matrix().shape(),
        });
    }
    let r = cloud.points();
    let w = weights.matrix();
    let (n, d) = r.shape();
    // R W first, then contract against R^T.
    let rw = DMatrix::from_fn(n, d, |i, y| {
        let mut acc = 0.0;
        for x in 0..d {
            acc += r[(i, x)] * w[(x, y)];
        }
        acc
    });
    let g = DMatrix::from_fn(n, n, |i, j| {
        let mut acc = 0.0;
        for y in 0..d {
            acc += rw[(i, y)] * r[(j, y)];
        }
        acc
    });
    Ok(GramMatrix {
        values: g,
        kind: GramKind::Generalized,
    })
}

pub fn hermitian_partition(weights: &InteractionWeights) -> HermitianPartition {
    let w = weights.matrix();
    let d = w.nrows();
    let symmetric = DMatrix::from_fn(d, d, |x, y| (w[(x, y)] + w[(y, x)]) / 2.0);
    let antisymmetric = DMatrix::from_fn(d, d, |x, y| (w[(x, y)] - w[(y, x)]) / 2.0);
    HermitianPartition {
        symmetric,
        antisymmetric,
    }
}

/// Splits a Gram matrix into its forward and backward divergences.
pub fn bidivergence(gram: &GramMatrix) -> Bidivergence {
    let g = gram.values();
    let n = g.nrows();
    let fwd = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { g[(i, i)] - g[(i, j)] });
    let bwd = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { g[(j, j)] - g[(j, i)] });
    Bidivergence {
        fwd,
        bwd,
        kind: gram.kind(),
    }
}

/// `D^2 = fwd + bwd`. For a plain Gram matrix, rounding-level negative
/// entries are clamped to zero.
pub fn squared_distance(bidiv: &Bidivergence) -> DMatrix<f64> {
    let mut d2 = &bidiv.fwd + &bidiv.bwd;
    if bidiv.kind == GramKind::Plain {
        d2.apply(|v| *v = v.max(0.0));
    }
    d2
}

/// Antisymmetric edge phases `beta * (G[i][j] - G[j][i]) / 2` of the
/// generalized Gram matrix. Only the antisymmetric part of `W` contributes.
pub fn edge_phases(
    cloud: &DataCloud,
    weights: &InteractionWeights,
    beta: f64,
) -> Result<DMatrix<f64>> {
    ensure_positive_beta(beta)?;
    let g = generalized_gram(cloud, weights)?;
    let g = g.values();
    let n = g.nrows();
    Ok(DMatrix::from_fn(n, n, |i, j| beta * (g[(i, j)] - g[(j, i)]) * 0.5))
}

/// `1 / median(D^2[i][j], i != j)`, a common bandwidth heuristic.
pub fn median_inverse_bandwidth(d2: &DMatrix<f64>) -> Result<f64> {
    let n = d2.nrows();
    let mut off: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| d2[(i, j)])
        .collect();
    if off.is_empty() {
        return Err(Error::InvalidInput("need at least two samples".into()));
    }
    off.sort_by(f64::total_cmp);
    let m = off.len();
    let median = if m % 2 == 1 {
        off[m / 2]
    } else {
        0.5 * (off[m / 2 - 1] + off[m / 2])
    };
    if !(median > 0.0 && median.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "median squared distance is {median}; cannot derive beta"
        )));
    }
    Ok(1.0 / median)
}

pub(crate) fn ensure_positive_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "beta must be positive and finite, got {beta}"
        )))
    }
}

pub(crate) fn ensure_finite(context: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{context} has non-finite entries")))
    }
}

//! One-step discrete Schrodinger bridges, Doob transforms, currents and
//! dynamical regimes, plus the exact factorizations tying diffusion maps to
//! attention.
//!
//! A bridge over a positive reference kernel `P` with endpoint marginals
//! `mu+`, `mu-` is the KL-closest coupling `Pi` with those marginals. It
//! factorizes as `diag(u+) P diag(u-)`, and its forward operator
//! `Pi+[i][j] = Pi[i][j] / mu+[i]` is the Doob transform of the row
//! normalization of `P` with `h = u-`.
//!
//! Regimes follow the usual probability-current classification:
//!
//! - `EQ`: stationary marginal, all currents vanish (detailed balance);
//! - `NESS`: stationary marginal, some current is nonzero;
//! - `NE`: source and sink marginals differ.

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{ensure_positive_beta, squared_distance, Bidivergence};
use crate::normalize::{
    logsumexp, poe_combine_with_normalizer, scaled_exp, schrodinger_solve_log, softmax_rows,
    validate_marginal, ScalingPotentials, StochasticOperator, Stochasticity,
};
use crate::operators::{attention_backward, attention_forward, dmap, rbf_kernel, ComplexOperator};

/// Currents at or below this fraction of the largest edge flow
/// `max rho_i P_ij` count as zero.
pub const EQ_RELATIVE_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSolution {
    /// The coupling `Pi`.
    pub coupling: DMatrix<f64>,
    pub potentials: ScalingPotentials,
    pub mu_plus: DVector<f64>,
    pub mu_minus: DVector<f64>,
    /// `Pi+ = diag(1/mu+) Pi`.
    pub forward: StochasticOperator,
    /// Log of the reference kernel the bridge was solved against.
    pub log_kernel: DMatrix<f64>,
}

impl BridgeSolution {
    /// `diag(u+) P diag(u-)` from the stored potentials.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        scaled_exp(&self.log_kernel, &self.potentials.log_u, &self.potentials.log_v)
    }

    /// Largest violation of the two marginal constraints.
    pub fn marginal_residual(&self) -> f64 {
        let rows = self
            .coupling
            .row_iter()
            .zip(self.mu_plus.iter())
            .map(|(r, m)| (r.sum() - m).abs())
            .fold(0.0, f64::max);
        let cols = self
            .coupling
            .column_iter()
            .zip(self.mu_minus.iter())
            .map(|(c, m)| (c.sum() - m).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }

    /// `max_j |(mu+ Pi+)_j - mu-_j|`.
    pub fn propagation_residual(&self) -> f64 {
        let pushed = self.forward.values().tr_mul(&self.mu_plus);
        (pushed - &self.mu_minus).amax()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    #[serde(rename = "EQ")]
    Equilibrium,
    #[serde(rename = "NESS")]
    SteadyState,
    #[serde(rename = "NE")]
    Nonstationary,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Equilibrium => "EQ",
            Regime::SteadyState => "NESS",
            Regime::Nonstationary => "NE",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeReport {
    /// The common marginal, when source and sink agree and it is stationary.
    pub stationary: Option<DVector<f64>>,
    /// `max |mu+ - mu+ P|`.
    pub stationarity_residual: f64,
    /// `max |mu+ - mu-|`.
    pub marginal_gap: f64,
    /// Currents evaluated at `mu+`.
    pub currents: DMatrix<f64>,
    pub max_current: f64,
    /// Zero-current threshold actually applied.
    pub current_threshold: f64,
    pub regime: Regime,
}

/// Bridge over a strictly positive kernel.
pub fn solve_bridge(
    kernel: &DMatrix<f64>,
    mu_plus: &DVector<f64>,
    mu_minus: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<BridgeSolution> {
    if let Some(v) = kernel.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "reference kernel must be strictly positive, found {v}"
        )));
    }
    solve_bridge_log(&kernel.map(f64::ln), mu_plus, mu_minus, tol, max_iter)
}

/// Bridge over `exp(log_kernel)`.
pub fn solve_bridge_log(
    log_kernel: &DMatrix<f64>,
    mu_plus: &DVector<f64>,
    mu_minus: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<BridgeSolution> {
    let potentials = schrodinger_solve_log(log_kernel, mu_plus, mu_minus, tol, max_iter)?;
    let coupling = scaled_exp(log_kernel, &potentials.log_u, &potentials.log_v);
    let forward = divide_rows(&coupling, mu_plus);
    Ok(BridgeSolution {
        coupling,
        potentials,
        mu_plus: mu_plus.clone(),
        mu_minus: mu_minus.clone(),
        forward: StochasticOperator::from_parts(forward, Stochasticity::Row),
        log_kernel: log_kernel.clone(),
    })
}

fn divide_rows(m: &DMatrix<f64>, by: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row /= by[i];
    }
    out
}

/// Intrinsic stationary distribution of the diffusion operator, the kernel
/// row sums normalized to one.
pub fn dmap_stationary(d2: &DMatrix<f64>, beta: f64) -> Result<DVector<f64>> {
    let k = rbf_kernel(d2, beta)?;
    let z = DVector::from_iterator(k.values.nrows(), k.values.row_iter().map(|r| r.sum()));
    let total = z.sum();
    Ok(z / total)
}

/// The diffusion-map operator as an equilibrium bridge with both marginals
/// equal to its intrinsic stationary distribution.
///
/// Uses the closed-form potentials `u+ = pi / Z`, `u- = 1`; no iterations
/// are run, and the potentials are reported in that gauge.
pub fn dmap_as_bridge(d2: &DMatrix<f64>, beta: f64) -> Result<BridgeSolution> {
    let kernel = rbf_kernel(d2, beta)?;
    let n = kernel.values.nrows();
    let z = DVector::from_iterator(n, kernel.values.row_iter().map(|r| r.sum()));
    let pi = &z / z.sum();
    let p_plus = dmap(d2, beta)?;
    let coupling = DMatrix::from_fn(n, n, |i, j| pi[i] * p_plus.values()[(i, j)]);
    let u = pi.component_div(&z);
    let log_u = u.map(f64::ln);
    let potentials = ScalingPotentials {
        u,
        v: DVector::from_element(n, 1.0),
        log_u,
        log_v: DVector::zeros(n),
        iterations: 0,
        residual: 0.0,
    };
    let forward = divide_rows(&coupling, &pi);
    let mut solution = BridgeSolution {
        coupling,
        potentials,
        mu_plus: pi.clone(),
        mu_minus: pi,
        forward: StochasticOperator::from_parts(forward, Stochasticity::Row),
        log_kernel: d2 * -beta,
    };
    solution.potentials.residual = solution.marginal_residual();
    Ok(solution)
}

/// Doob h-transform `P[i][j] h[j] / sum_k P[i][k] h[k]`.
///
/// A constant `h` returns the operator unchanged.
pub fn doob_transform(p_plus: &StochasticOperator, h: &DVector<f64>) -> Result<StochasticOperator> {
    let n = p_plus.len();
    if h.len() != n {
        return Err(Error::DimensionMismatch {
            context: "doob transform",
            expected: (n, 1),
            found: (h.len(), 1),
        });
    }
    if let Some(v) = h.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "doob transform needs a strictly positive h, found {v}"
        )));
    }
    if h.iter().all(|v| *v == h[0]) {
        return Ok(StochasticOperator::from_parts(p_plus.values().clone(), Stochasticity::Row));
    }
    let mut out = p_plus.values().clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= h[j];
    }
    for mut row in out.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    Ok(StochasticOperator::from_parts(out, Stochasticity::Row))
}

/// Left fixed point `pi = pi P` by power iteration from the uniform vector.
pub fn stationary_distribution(
    p: &StochasticOperator,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    if p.kind() == Stochasticity::Column {
        return Err(Error::InvalidInput(
            "stationary distribution needs a row-stochastic operator".into(),
        ));
    }
    let n = p.len();
    let mut pi = DVector::from_element(n, 1.0 / n as f64);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let mut next = p.values().tr_mul(&pi);
        let s = next.sum();
        next /= s;
        residual = (&next - &pi).amax();
        pi = next;
        if residual <= tol {
            return Ok(pi);
        }
    }
    Err(Error::NotConverged {
        solver: "stationary power iteration",
        iterations: max_iter,
        residual,
    })
}

/// Net probability flow `J[i][j] = rho_i P_ij - rho_j P_ji`.
pub fn currents(p: &StochasticOperator, rho: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = p.len();
    if rho.len() != n {
        return Err(Error::DimensionMismatch {
            context: "currents",
            expected: (n, 1),
            found: (rho.len(), 1),
        });
    }
    let v = p.values();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        rho[i] * v[(i, j)] - rho[j] * v[(j, i)]
    }))
}

/// Classifies `(P, mu+, mu-)` as EQ, NESS or NE.
///
/// A marginal mismatch beyond `tol` is NE regardless of anything else.
/// Otherwise currents at `mu+` decide between EQ and NESS, with the
/// relative threshold [`EQ_RELATIVE_THRESHOLD`]. The stationarity residual
/// is reported but does not change the label.
pub fn classify_regime(
    p: &StochasticOperator,
    mu_plus: &DVector<f64>,
    mu_minus: &DVector<f64>,
    tol: f64,
) -> Result<RegimeReport> {
    let n = p.len();
    for (name, mu) in [("mu_plus", mu_plus), ("mu_minus", mu_minus)] {
        if mu.len() != n {
            return Err(Error::InvalidMarginal(format!(
                "{name} has length {}, expected {n}",
                mu.len()
            )));
        }
    }
    let marginal_gap = (mu_plus - mu_minus).amax();
    let stationarity_residual = (p.values().tr_mul(mu_plus) - mu_plus).amax();
    let j = currents(p, mu_plus)?;
    let max_current = j.amax();
    let max_flow = (0..n)
        .flat_map(|i| (0..n).map(move |k| (i, k)))
        .map(|(i, k)| (mu_plus[i] * p.values()[(i, k)]).abs())
        .fold(0.0, f64::max);
    let current_threshold = EQ_RELATIVE_THRESHOLD * max_flow;

    let regime = if marginal_gap > tol {
        Regime::Nonstationary
    } else if max_current <= current_threshold {
        Regime::Equilibrium
    } else {
        Regime::SteadyState
    };
    let stationary = (regime != Regime::Nonstationary && stationarity_residual <= tol)
        .then(|| mu_plus.clone());
    Ok(RegimeReport {
        stationary,
        stationarity_residual,
        marginal_gap,
        currents: j,
        max_current,
        current_threshold,
        regime,
    })
}

/// Diffusion operator assembled from the two attention maps,
/// `P+[i][j] = A+[i][j] A-[i][j] z-[j] / sum_l z-[l] A+[i][l] A-[i][l]`,
/// with `z-[j] = sum_l exp(-beta * bwd[l][j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SbFactorization {
    pub operator: StochasticOperator,
    /// `log z-`.
    pub log_column_partition: DVector<f64>,
}

impl SbFactorization {
    /// `max log z- - min log z-`; zero when the column factors are constant
    /// and the form reduces to a plain product of experts.
    pub fn column_spread(&self) -> f64 {
        self.log_column_partition.max() - self.log_column_partition.min()
    }
}

pub fn sb_factorization(bidiv: &Bidivergence, beta: f64) -> Result<SbFactorization> {
    ensure_positive_beta(beta)?;
    let a_plus = attention_forward(bidiv, beta)?;
    let a_minus = attention_backward(bidiv, beta)?;
    let n = bidiv.len();
    let log_z = DVector::from_fn(n, |j, _| {
        logsumexp((0..n).map(|l| -beta * bwd_entry(bidiv, l, j)))
    });
    let shift = log_z.max();
    let scale = log_z.map(|v| (v - shift).exp());
    let mut rhs = DMatrix::from_fn(n, n, |i, j| {
        a_plus.values()[(i, j)] * a_minus.values()[(i, j)] * scale[j]
    });
    for mut row in rhs.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    Ok(SbFactorization {
        operator: StochasticOperator::from_parts(rhs, Stochasticity::Row),
        log_column_partition: log_z,
    })
}

fn bwd_entry(bidiv: &Bidivergence, i: usize, j: usize) -> f64 {
    bidiv.bwd[(i, j)]
}

/// `max |SB form - dmap(D^2, beta)|`.
pub fn sb_factorization_check(bidiv: &Bidivergence, beta: f64) -> Result<f64> {
    let sb = sb_factorization(bidiv, beta)?;
    let p = dmap(&squared_distance(bidiv), beta)?;
    Ok((sb.operator.values() - p.values()).amax())
}

/// Diffusion operator as the renormalized product of the two row-softmax
/// experts `softmax_rows(-beta fwd)` and `softmax_rows(-beta bwd)`.
pub fn poe_factorization(bidiv: &Bidivergence, beta: f64) -> Result<StochasticOperator> {
    poe_factorization_with_normalizer(bidiv, beta).map(|(op, _)| op)
}

/// As [`poe_factorization`], also returning the row normalizer
/// `m+[i] = (sum_l A_fwd[i][l] A_bwd[i][l])^-1`.
pub fn poe_factorization_with_normalizer(
    bidiv: &Bidivergence,
    beta: f64,
) -> Result<(StochasticOperator, DVector<f64>)> {
    ensure_positive_beta(beta)?;
    let fwd_expert = softmax_rows(&(&bidiv.fwd * -beta));
    let bwd_expert = softmax_rows(&(&bidiv.bwd * -beta));
    poe_combine_with_normalizer(&fwd_expert, &bwd_expert)
}

/// `softmax_rows(-beta fwd[i][j] + psi[j])`.
pub fn column_biased_attention(
    bidiv: &Bidivergence,
    beta: f64,
    psi: &DVector<f64>,
) -> Result<StochasticOperator> {
    ensure_positive_beta(beta)?;
    let n = bidiv.len();
    if psi.len() != n {
        return Err(Error::DimensionMismatch {
            context: "column bias",
            expected: (n, 1),
            found: (psi.len(), 1),
        });
    }
    Ok(softmax_rows(&DMatrix::from_fn(n, n, |i, j| {
        -beta * bidiv.fwd[(i, j)] + psi[j]
    })))
}

/// Bridge over the unnormalized forward attention kernel
/// `exp(-beta * fwd)`.
pub fn attention_bridge(
    bidiv: &Bidivergence,
    beta: f64,
    mu_plus: &DVector<f64>,
    mu_minus: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<BridgeSolution> {
    ensure_positive_beta(beta)?;
    solve_bridge_log(&(&bidiv.fwd * -beta), mu_plus, mu_minus, tol, max_iter)
}

/// Complex edge flux `pi_i P_ij exp(i theta_ij)` and its imaginary part,
/// the magnetic current.
pub fn magnetic_flux(
    pi: &DVector<f64>,
    op: &ComplexOperator,
) -> Result<(DMatrix<Complex<f64>>, DMatrix<f64>)> {
    let n = op.len();
    if pi.len() != n {
        return Err(Error::DimensionMismatch {
            context: "magnetic flux",
            expected: (n, 1),
            found: (pi.len(), 1),
        });
    }
    let p = op.magnitudes().values();
    let theta = op.phases();
    let flux = DMatrix::from_fn(n, n, |i, j| Complex::from_polar(pi[i] * p[(i, j)], theta[(i, j)]));
    let current = DMatrix::from_fn(n, n, |i, j| pi[i] * p[(i, j)] * theta[(i, j)].sin());
    Ok((flux, current))
}

/// Antisymmetric log-flux `log(pi_i A_ij / (pi_j A_ji))` of a strictly
/// positive operator. Zero exactly where detailed balance holds. Phases are
/// left unwrapped.
pub fn attention_gauge(pi_plus: &DVector<f64>, a_plus: &StochasticOperator) -> Result<DMatrix<f64>> {
    let n = a_plus.len();
    validate_marginal_loose(pi_plus, n)?;
    if let Some(v) = a_plus.values().iter().find(|v| v.is_nan() || **v <= 0.0) {
        return Err(Error::InvalidInput(format!(
            "log-flux needs a strictly positive operator, found {v}"
        )));
    }
    let log_flow = DMatrix::from_fn(n, n, |i, j| pi_plus[i].ln() + a_plus.values()[(i, j)].ln());
    Ok(DMatrix::from_fn(n, n, |i, j| log_flow[(i, j)] - log_flow[(j, i)]))
}

fn validate_marginal_loose(pi: &DVector<f64>, n: usize) -> Result<()> {
    // Power iteration leaves pi normalized only to rounding.
    let mut scaled = pi.clone();
    let s = scaled.sum();
    if s > 0.0 {
        scaled /= s;
    }
    validate_marginal("pi", &scaled, n)
}

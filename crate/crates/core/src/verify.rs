//! Identity-verification suite.
//!
//! [`verify`] runs every exact identity relating the operators of this
//! crate on one point cloud and returns a per-criterion table of residuals
//! and tolerances. A few checks need ingredients the input may lack (a
//! factored or asymmetric interaction matrix, random marginals, a fixed
//! small instance); those are drawn from a seeded generator so that the
//! report is reproducible bit for bit.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::bridges::{
    attention_bridge, attention_gauge, classify_regime, column_biased_attention, currents,
    dmap_as_bridge, dmap_stationary, doob_transform, magnetic_flux, poe_factorization,
    sb_factorization_check, solve_bridge, solve_bridge_log, stationary_distribution, Regime,
};
use crate::error::{Error, Result};
use crate::geometry::{
    bidivergence, edge_phases, generalized_gram, gram, squared_distance, Bidivergence, DataCloud,
    GramKind, InteractionWeights,
};
use crate::normalize::{
    poe_combine, sinkhorn, softmax_cols, softmax_rows, StochasticOperator,
    Stochasticity,
};
use crate::operators::{
    antisymmetry_violation, attention_backward, attention_bistochastic, attention_forward,
    directional_kernels, dmap, dmap_bistochastic, dmap_by_degree, magnetic_operator, rbf_kernel,
    Direction,
};
use crate::spectral::{
    conjugate_hermitize, conjugate_symmetrize, decompose, decompose_hermitian, diffusion_embedding,
};

/// Seed for every auxiliary random draw made by [`verify`].
pub const VERIFY_SEED: u64 = 0x5eed_6e0d;

const SOLVER_MAX_ITER: usize = 200_000;
const STATIONARY_TOL: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    AtMost,
    GreaterThan,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            comparison: Comparison::AtMost,
            passed: value <= tolerance,
        }
    }

    pub fn greater_than(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance: bound,
            comparison: Comparison::GreaterThan,
            passed: value > bound,
        }
    }

    /// A boolean condition encoded as `0` (holds) against tolerance `0`.
    pub fn holds(name: impl Into<String>, condition: bool) -> Self {
        Self::at_most(name, if condition { 0.0 } else { 1.0 }, 0.0)
    }

    fn failed(name: impl Into<String>, tolerance: f64, err: &Error) -> Self {
        let mut c = Self::at_most(format!("{} [{err}]", name.into()), f64::INFINITY, tolerance);
        c.passed = false;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u32,
    pub title: &'static str,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub samples: usize,
    pub features: usize,
    pub beta: f64,
    pub passed: bool,
    pub criteria: Vec<CriterionResult>,
}

impl VerificationReport {
    pub fn criterion(&self, id: u32) -> Option<&CriterionResult> {
        self.criteria.iter().find(|c| c.id == id)
    }
}

trait IntoChecks {
    fn append_to(self, out: &mut Vec<Check>);
}

impl IntoChecks for Check {
    fn append_to(self, out: &mut Vec<Check>) {
        out.push(self);
    }
}

impl IntoChecks for Vec<Check> {
    fn append_to(mut self, out: &mut Vec<Check>) {
        out.append(&mut self);
    }
}

/// Collects checks for one criterion, turning solver errors into failed
/// rows instead of aborting the whole run.
struct Criterion {
    id: u32,
    title: &'static str,
    checks: Vec<Check>,
}

impl Criterion {
    fn new(id: u32, title: &'static str) -> Self {
        Self {
            id,
            title,
            checks: Vec::new(),
        }
    }

    fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    fn attempt<R: IntoChecks>(&mut self, name: &str, tolerance: f64, f: impl FnOnce() -> Result<R>) {
        match f() {
            Ok(r) => r.append_to(&mut self.checks),
            Err(e) => self.checks.push(Check::failed(name, tolerance, &e)),
        }
    }

    fn finish(self) -> CriterionResult {
        CriterionResult {
            id: self.id,
            title: self.title,
            passed: !self.checks.is_empty() && self.checks.iter().all(|c| c.passed),
            checks: self.checks,
        }
    }
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Strictly positive probability vector with entries in a 1:3 range.
fn random_marginal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
    let s = v.sum();
    v / s
}

/// Seeded query/key factors of full rank `d`, scaled to unit-order scores.
pub fn seeded_factored_weights(dim: usize, seed: u64) -> InteractionWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dim as f64).sqrt().max(1.0);
    let q = normal_matrix(&mut rng, dim, dim, scale.sqrt());
    let k = normal_matrix(&mut rng, dim, dim, scale.sqrt());
    InteractionWeights::from_factors(q, k).expect("finite factors")
}

/// Inverse temperature for [`two_cluster_fixture`]: clusters stay coupled
/// at roughly `1e-4`, well above rounding.
pub const TWO_CLUSTER_BETA: f64 = 0.25;

/// Two tight groups of four points far apart in the plane.
pub fn two_cluster_fixture() -> DataCloud {
    let offsets = [[0.0, 0.0], [0.3, 0.1], [-0.2, 0.25], [0.1, -0.3]];
    let mut rows = Vec::new();
    for center in [[-3.0, 0.0], [3.0, 0.5]] {
        for o in offsets {
            rows.push(vec![center[0] + o[0], center[1] + o[1]]);
        }
    }
    DataCloud::new(DMatrix::from_fn(8, 2, |i, j| rows[i][j])).expect("valid fixture")
}

/// Pairwise `|R_i - R_j|^2` by direct differences.
pub fn pairwise_sq_norms(cloud: &DataCloud) -> DMatrix<f64> {
    let r = cloud.points();
    let n = r.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        (0..r.ncols()).map(|x| (r[(i, x)] - r[(j, x)]).powi(2)).sum()
    })
}

/// Runs the full identity suite on `cloud` at inverse temperature `beta`.
///
/// `weights`, when given, is used for the weighted-geometry checks; a
/// factored matrix is also used for the attention equivalence. Missing or
/// unsuitable ingredients are generated from [`VERIFY_SEED`].
pub fn verify(
    cloud: &DataCloud,
    beta: f64,
    weights: Option<&InteractionWeights>,
) -> Result<VerificationReport> {
    crate::geometry::ensure_positive_beta(beta)?;
    if let Some(w) = weights {
        if w.dim() != cloud.dim() {
            return Err(Error::DimensionMismatch {
                context: "interaction weights vs cloud features",
                expected: (cloud.dim(), cloud.dim()),
                found: w.matrix().shape(),
            });
        }
    }
    let generated = seeded_factored_weights(cloud.dim(), VERIFY_SEED);
    let weighted = weights.unwrap_or(&generated);
    let factored = match weights {
        Some(w) if w.factors().is_some() => w,
        _ => &generated,
    };
    let ctx = Context::new(cloud, beta, weighted, factored)?;
    let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED ^ 0xa5a5);

    let criteria = vec![
        ctx.bidivergence_identity(),
        ctx.attention_equivalence(),
        ctx.poe_theorem(&mut rng),
        ctx.kernel_factorization(),
        ctx.sb_factorization(),
        ctx.poe_factorization(),
        ctx.dmap_equilibrium(),
        ctx.sinkhorn_contract(&mut rng),
        ctx.bridge_contract(&mut rng),
        ctx.doob_transform(&mut rng),
        ctx.attention_as_bridge(&mut rng),
        ctx.magnetic(),
        ctx.spectral(),
    ];
    Ok(VerificationReport {
        samples: cloud.len(),
        features: cloud.dim(),
        beta,
        passed: criteria.iter().all(|c| c.passed),
        criteria,
    })
}

struct Context<'a> {
    cloud: &'a DataCloud,
    beta: f64,
    weighted: &'a InteractionWeights,
    factored: &'a InteractionWeights,
    plain: Bidivergence,
    d2: DMatrix<f64>,
    gram_scale: f64,
    weighted_bd: Bidivergence,
}

impl<'a> Context<'a> {
    fn new(
        cloud: &'a DataCloud,
        beta: f64,
        weighted: &'a InteractionWeights,
        factored: &'a InteractionWeights,
    ) -> Result<Self> {
        let g = gram(cloud);
        // absolute tolerances assume unit-scale data; scale with the Gram
        // diagonal for anything larger
        let gram_scale = g.values().diagonal().amax().max(1.0);
        let plain = bidivergence(&g);
        let d2 = squared_distance(&plain);
        let weighted_bd = bidivergence(&generalized_gram(cloud, weighted)?);
        Ok(Self {
            cloud,
            beta,
            weighted,
            factored,
            plain,
            d2,
            gram_scale,
            weighted_bd,
        })
    }

    fn betas(&self) -> [f64; 3] {
        [self.beta / 10.0, self.beta, self.beta * 10.0]
    }

    fn bidivergence_identity(&self) -> CriterionResult {
        let mut c = Criterion::new(1, "bidivergence identity");
        let tol = 1e-12 * self.gram_scale;
        let sum = &self.plain.fwd + &self.plain.bwd;
        c.push(Check::at_most("fwd + bwd = D^2", max_abs_diff(&sum, &self.d2), tol));
        c.push(Check::at_most(
            "D^2 matches pairwise norms",
            max_abs_diff(&self.d2, &pairwise_sq_norms(self.cloud)),
            tol,
        ));
        for (label, bd) in [("plain", &self.plain), ("weighted", &self.weighted_bd)] {
            let diag = bd.fwd.diagonal().amax().max(bd.bwd.diagonal().amax());
            c.push(Check::at_most(format!("self-zero diagonal ({label})"), diag, 0.0));
            c.push(Check::at_most(
                format!("fwd = bwd^T ({label})"),
                max_abs_diff(&bd.fwd, &bd.bwd.transpose()),
                0.0,
            ));
        }
        c.attempt("Mahalanobis reduction", tol, || {
            let sym = bidivergence(&generalized_gram(self.cloud, &self.weighted.symmetrized())?);
            Ok(Check::at_most(
                "D^2(W) = D^2((W + W^T)/2)",
                max_abs_diff(&squared_distance(&self.weighted_bd), &squared_distance(&sym)),
                tol,
            ))
        });
        c.finish()
    }

    fn attention_equivalence(&self) -> CriterionResult {
        let mut c = Criterion::new(2, "attention equals softmax(beta Q K^T)");
        let (wq, wk) = self.factored.factors().expect("factored weights");
        let q = self.cloud.points() * wq;
        let k = self.cloud.points() * wk;
        let qk = &q * k.transpose();
        let bd = match generalized_gram(self.cloud, self.factored) {
            Ok(g) => bidivergence(&g),
            Err(e) => {
                c.push(Check::failed("generalized gram", 1e-12, &e));
                return c.finish();
            }
        };
        for beta in self.betas() {
            c.attempt(&format!("beta = {beta}"), 1e-12, || {
                let a = attention_forward(&bd, beta)?;
                let reference = softmax_rows(&(&qk * beta));
                Ok(Check::at_most(
                    format!("A+ vs softmax(beta QK^T), beta = {beta}"),
                    max_abs_diff(a.values(), reference.values()),
                    1e-12,
                ))
            });
        }
        c.finish()
    }

    fn poe_theorem(&self, rng: &mut ChaCha8Rng) -> CriterionResult {
        let mut c = Criterion::new(3, "product-of-experts theorem and shift invariance");
        let n = 16;
        let z = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let s = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let sum = &z + &s;
        let combined = poe_combine(&softmax_rows(&z), &softmax_rows(&s));
        let combined_cols = poe_combine(&softmax_cols(&z), &softmax_cols(&s));
        match (combined, combined_cols) {
            (Ok(r), Ok(col)) => {
                c.push(Check::at_most(
                    "rows: softmax(z + s) = PoE (16x16)",
                    max_abs_diff(softmax_rows(&sum).values(), r.values()),
                    1e-12,
                ));
                c.push(Check::at_most(
                    "columns: softmax(z + s) = PoE (16x16)",
                    max_abs_diff(softmax_cols(&sum).values(), col.values()),
                    1e-12,
                ));
            }
            (Err(e), _) | (_, Err(e)) => c.push(Check::failed("product of experts", 1e-12, &e)),
        }
        let fwd = &self.plain.fwd * -self.beta;
        let bwd = &self.plain.bwd * -self.beta;
        c.attempt("PoE on divergence logits", 1e-12, || {
            let r = poe_combine(&softmax_rows(&fwd), &softmax_rows(&bwd))?;
            Ok(Check::at_most(
                "rows: PoE on -beta fwd, -beta bwd",
                max_abs_diff(softmax_rows(&(&fwd + &bwd)).values(), r.values()),
                1e-12,
            ))
        });
        let row_shift: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let col_shift: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zr = DMatrix::from_fn(n, n, |i, j| z[(i, j)] + row_shift[i]);
        let zc = DMatrix::from_fn(n, n, |i, j| z[(i, j)] + col_shift[j]);
        c.push(Check::at_most(
            "row shift invariance",
            max_abs_diff(softmax_rows(&zr).values(), softmax_rows(&z).values()),
            1e-15,
        ));
        c.push(Check::at_most(
            "column shift invariance",
            max_abs_diff(softmax_cols(&zc).values(), softmax_cols(&z).values()),
            1e-15,
        ));
        c.finish()
    }

    fn kernel_factorization(&self) -> CriterionResult {
        let mut c = Criterion::new(4, "RBF kernel = A_fwd (.) A_bwd");
        for (label, bd) in [("plain", &self.plain), ("weighted", &self.weighted_bd)] {
            // plain kernels are bounded by one; weighted ones may exceed it,
            // and exp turns argument rounding eps * |beta d| into relative error
            let tol = match bd.kind() {
                GramKind::Plain => 1e-12,
                GramKind::Generalized => 1e-12 * (self.beta * bd.fwd.amax()).max(1.0),
            };
            c.attempt(label, tol, || {
                let p = rbf_kernel(&squared_distance(bd), self.beta)?;
                let (af, ab) = directional_kernels(bd, self.beta)?;
                let rel = p
                    .values
                    .zip_map(&af.component_mul(&ab), |x, y| (x - y).abs() / x.max(1.0))
                    .amax();
                Ok(Check::at_most(format!("Hadamard factorization ({label})"), rel, tol))
            });
        }
        c.finish()
    }

    fn sb_factorization(&self) -> CriterionResult {
        let mut c = Criterion::new(5, "Schrodinger-bridge factorization of DMAP");
        for (label, bd) in [("plain", &self.plain), ("weighted", &self.weighted_bd)] {
            for beta in self.betas() {
                let name = format!("SB form vs dmap ({label}, beta = {beta})");
                c.attempt(&name.clone(), 1e-10, || {
                    Ok(Check::at_most(name, sb_factorization_check(bd, beta)?, 1e-10))
                });
            }
        }
        c.finish()
    }

    fn poe_factorization(&self) -> CriterionResult {
        let mut c = Criterion::new(6, "product-of-experts factorization of DMAP");
        for (label, bd) in [("plain", &self.plain), ("weighted", &self.weighted_bd)] {
            for beta in self.betas() {
                let name = format!("PoE form vs dmap ({label}, beta = {beta})");
                c.attempt(&name.clone(), 1e-12, || {
                    let poe = poe_factorization(bd, beta)?;
                    let p = dmap(&squared_distance(bd), beta)?;
                    Ok(Check::at_most(name, max_abs_diff(poe.values(), p.values()), 1e-12))
                });
            }
        }
        c.finish()
    }

    fn dmap_equilibrium(&self) -> CriterionResult {
        let mut c = Criterion::new(7, "DMAP equilibrium");
        c.attempt("dmap equilibrium", 1e-12, || {
            let p = dmap(&self.d2, self.beta)?;
            let pi = dmap_stationary(&self.d2, self.beta)?;
            let moved = p.values().tr_mul(&pi);
            let j = currents(&p, &pi)?;
            let report = classify_regime(&p, &pi, &pi, 1e-12)?;
            let by_degree = dmap_by_degree(&self.d2, self.beta)?;
            Ok(vec![
                Check::at_most("pi = pi P+", (moved - &pi).amax(), 1e-12),
                Check::at_most("max |J(pi)|", j.amax(), 1e-12),
                Check::holds("classified EQ", report.regime == Regime::Equilibrium),
                Check::at_most(
                    "softmax path = degree path",
                    max_abs_diff(p.values(), by_degree.values()),
                    1e-12,
                ),
            ])
        });
        c.finish()
    }

    fn sinkhorn_contract(&self, rng: &mut ChaCha8Rng) -> CriterionResult {
        let mut c = Criterion::new(8, "Sinkhorn contract");
        let n = self.cloud.len();
        let z = &self.d2 * -self.beta;
        let za = &self.weighted_bd.fwd * -self.beta;

        let first = sinkhorn(&z, 1e-13, SOLVER_MAX_ITER);
        let second = attention_bistochastic(
            &self.weighted_bd,
            self.beta,
            Direction::Forward,
            1e-13,
            SOLVER_MAX_ITER,
        );
        match (&first, &second) {
            (Ok((a, _)), Ok(b)) => {
                c.push(Check::at_most("Sinkhorn(-beta D^2) bistochastic", a.residual(), 1e-10));
                c.push(Check::at_most("Sinkhorn(-beta fwd) bistochastic", b.residual(), 1e-10));
                let product = StochasticOperator::new(
                    a.values() * b.values(),
                    Stochasticity::Bi,
                    f64::INFINITY,
                )
                .map(|p| p.residual())
                .unwrap_or(f64::INFINITY);
                c.push(Check::at_most("product of bistochastic outputs", product, 1e-12));
            }
            (Err(e), _) | (_, Err(e)) => c.push(Check::failed("sinkhorn", 1e-10, e)),
        }

        c.attempt("bistochastic dmap", 1e-10, || {
            let p = dmap_bistochastic(&self.d2, self.beta, 1e-10, SOLVER_MAX_ITER)?;
            Ok(Check::at_most(
                "Sinkhorn DMAP bistochastic and symmetric",
                p.residual().max(max_abs_diff(p.values(), &p.values().transpose())),
                1e-10,
            ))
        });

        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let shifted = DMatrix::from_fn(n, n, |i, j| za[(i, j)] + u[i] + v[j]);
        c.attempt("gauge invariance", 1e-10, || {
            let (a, _) = sinkhorn(&za, 1e-13, SOLVER_MAX_ITER)?;
            let (b, _) = sinkhorn(&shifted, 1e-13, SOLVER_MAX_ITER)?;
            Ok(Check::at_most(
                "Sinkhorn(z + u_i + v_j) = Sinkhorn(z)",
                max_abs_diff(a.values(), b.values()),
                1e-10,
            ))
        });

        c.attempt("sinkhorn as schrodinger", 1e-10, || {
            let (a, _) = sinkhorn(&z, 1e-13, SOLVER_MAX_ITER)?;
            let uniform = DVector::from_element(n, 1.0 / n as f64);
            let b = solve_bridge_log(&z, &uniform, &uniform, 1e-14, SOLVER_MAX_ITER)?;
            Ok(Check::at_most(
                "Sinkhorn = N * bridge(uniform, uniform)",
                max_abs_diff(a.values(), &(b.coupling * n as f64)),
                1e-10,
            ))
        });

        c.attempt("2x2 instance", 1e-10, || {
            let k = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
            let (a, _) = sinkhorn(&k.map(f64::ln), 1e-13, SOLVER_MAX_ITER)?;
            let expected =
                DMatrix::from_row_slice(2, 2, &[2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]);
            Ok(Check::at_most(
                "[[2,1],[1,2]] -> [[2/3,1/3],[1/3,2/3]]",
                max_abs_diff(a.values(), &expected),
                1e-10,
            ))
        });
        c.finish()
    }

    fn bridge_contract(&self, rng: &mut ChaCha8Rng) -> CriterionResult {
        let mut c = Criterion::new(9, "Schrodinger bridge contract");
        let n = self.cloud.len();
        let log_p = &self.d2 * -self.beta;
        let mu_plus = random_marginal(rng, n);
        let mu_minus = random_marginal(rng, n);
        c.attempt("rbf bridge", 1e-10, || {
            let b = solve_bridge_log(&log_p, &mu_plus, &mu_minus, 1e-12, SOLVER_MAX_ITER)?;
            Ok(
                vec![
                    Check::at_most("marginal residual", b.marginal_residual(), 1e-10),
                    Check::at_most("mu+ Pi+ = mu-", b.propagation_residual(), 1e-10),
                    Check::at_most(
                        "Pi = diag(u+) P diag(u-)",
                        max_abs_diff(&b.coupling, &b.reconstruct()),
                        1e-10,
                    ),
                ],
            )
        });

        c.attempt("flat kernel", 1e-12, || {
            let flat = DMatrix::from_element(n, n, 1.0);
            let b = solve_bridge(&flat, &mu_plus, &mu_minus, 1e-13, SOLVER_MAX_ITER)?;
            Ok(Check::at_most(
                "flat kernel coupling = mu+ mu-^T",
                max_abs_diff(&b.coupling, &(&mu_plus * mu_minus.transpose())),
                1e-12,
            ))
        });

        c.attempt("dmap as bridge", 1e-10, || {
            let closed = dmap_as_bridge(&self.d2, self.beta)?;
            let iterative = solve_bridge_log(
                &log_p,
                &closed.mu_plus,
                &closed.mu_minus,
                1e-13,
                SOLVER_MAX_ITER,
            )?;
            Ok(Check::at_most(
                "closed-form DMAP potentials = iterative coupling",
                max_abs_diff(&closed.coupling, &iterative.coupling),
                1e-10,
            ))
        });

        c.attempt("bistochastic bridge", 1e-8, || {
            let uniform = DVector::from_element(n, 1.0 / n as f64);
            let b = solve_bridge_log(&log_p, &uniform, &uniform, 1e-12, SOLVER_MAX_ITER)?;
            let p = dmap_bistochastic(&self.d2, self.beta, 1e-12, SOLVER_MAX_ITER)?;
            Ok(Check::at_most(
                "uniform-marginal bridge forward = Sinkhorn DMAP",
                max_abs_diff(b.forward.values(), p.values()),
                1e-8,
            ))
        });
        c.finish()
    }

    fn doob_transform(&self, rng: &mut ChaCha8Rng) -> CriterionResult {
        let mut c = Criterion::new(10, "Doob transform");
        let n = self.cloud.len();
        c.attempt("doob", 1e-10, || {
            let p = dmap(&self.d2, self.beta)?;
            let identity = doob_transform(&p, &DVector::from_element(n, 1.0))?;
            let mu_plus = random_marginal(rng, n);
            let mu_minus = random_marginal(rng, n);
            let b = solve_bridge_log(
                &(&self.d2 * -self.beta),
                &mu_plus,
                &mu_minus,
                1e-12,
                SOLVER_MAX_ITER,
            )?;
            let tilted = doob_transform(&p, &b.potentials.v)?;
            Ok(vec![
                Check::at_most(
                    "h = 1 leaves P+ unchanged",
                    max_abs_diff(identity.values(), p.values()),
                    0.0,
                ),
                Check::at_most(
                    "bridge forward = Doob(P+, u-)",
                    max_abs_diff(b.forward.values(), tilted.values()),
                    1e-10,
                ),
            ])
        });
        c.finish()
    }

    fn attention_as_bridge(&self, rng: &mut ChaCha8Rng) -> CriterionResult {
        let mut c = Criterion::new(11, "attention as Schrodinger bridge");
        if let Err(e) = self.attention_as_bridge_checks(&mut c, rng) {
            c.push(Check::failed("attention instance", 1e-10, &e));
        }
        c.finish()
    }

    fn attention_as_bridge_checks(&self, c: &mut Criterion, rng: &mut ChaCha8Rng) -> Result<()> {
        let fixture;
        let fixture_weights;
        let (cloud, weights, label) = if self.cloud.dim() >= 2
            && antisymmetry_violation(self.weighted.matrix()) > 0.0
        {
            (self.cloud, self.weighted, "")
        } else if self.cloud.dim() >= 2 {
            (self.cloud, self.factored, " (seeded W)")
        } else {
            let mut frng = ChaCha8Rng::seed_from_u64(VERIFY_SEED);
            fixture = DataCloud::new(normal_matrix(&mut frng, 6, 2, 1.0))?;
            fixture_weights = seeded_factored_weights(2, VERIFY_SEED);
            (&fixture, &fixture_weights, " (fixture, 1-D input)")
        };
        let n = cloud.len();
        let bd = bidivergence(&generalized_gram(cloud, weights)?);
        let beta = self.beta;
        let a_plus = attention_forward(&bd, beta)?;

        let mu_plus = random_marginal(rng, n);
        let matched = a_plus.values().tr_mul(&mu_plus);
        c.attempt("matched marginals", 1e-10, || {
            let b = attention_bridge(&bd, beta, &mu_plus, &matched, 1e-13, SOLVER_MAX_ITER)?;
            Ok(Check::at_most(
                format!("mu- = mu+ A+ gives Pi+ = A+{label}"),
                max_abs_diff(b.forward.values(), a_plus.values()),
                1e-10,
            ))
        });

        let hi = matched.imax();
        let lo = matched.imin();
        let mut perturbed = matched.clone();
        perturbed[hi] -= 1e-3;
        perturbed[lo] += 1e-3;
        c.attempt("perturbed marginals", 1e-5, || {
            let b = attention_bridge(&bd, beta, &mu_plus, &perturbed, 1e-13, SOLVER_MAX_ITER)?;
            Ok(Check::greater_than(
                format!("TV 1e-3 perturbation of mu- breaks Pi+ = A+{label}"),
                max_abs_diff(b.forward.values(), a_plus.values()),
                1e-5,
            ))
        });

        let mu_minus = random_marginal(rng, n);
        c.attempt("generic marginals", 1e-10, || {
            let b = attention_bridge(&bd, beta, &mu_plus, &mu_minus, 1e-13, SOLVER_MAX_ITER)?;
            let biased = column_biased_attention(&bd, beta, &b.potentials.log_v)?;
            let doob = doob_transform(&a_plus, &b.potentials.v)?;
            Ok(vec![
                Check::at_most(
                    format!("Pi+ = softmax(-beta fwd + psi){label}"),
                    max_abs_diff(b.forward.values(), biased.values()),
                    1e-10,
                ),
                Check::at_most(
                    format!("Pi+ = Doob(A+, u-){label}"),
                    max_abs_diff(b.forward.values(), doob.values()),
                    1e-10,
                ),
            ])
        });

        c.attempt("stationary bridge", 1e-10, || {
            let pi = stationary_distribution(&a_plus, STATIONARY_TOL, SOLVER_MAX_ITER)?;
            let b = attention_bridge(&bd, beta, &pi, &pi, 1e-13, SOLVER_MAX_ITER)?;
            let report = classify_regime(&b.forward, &pi, &pi, 1e-12)?;
            Ok(vec![
                Check::at_most(
                    format!("stationary bridge Pi+ = A+{label}"),
                    max_abs_diff(b.forward.values(), a_plus.values()),
                    1e-10,
                ),
                Check::holds(
                    format!("stationary attention bridge is NESS{label}"),
                    report.regime == Regime::SteadyState,
                ),
                Check::greater_than(
                    format!("max current / EQ threshold{label}"),
                    report.max_current / report.current_threshold,
                    10.0,
                ),
            ])
        });
        Ok(())
    }

    fn magnetic(&self) -> CriterionResult {
        let mut c = Criterion::new(12, "magnetic operators and gauges");
        c.attempt("magnetic", 1e-10, || {
            let d2 = squared_distance(&self.weighted_bd);
            let p = dmap(&d2, self.beta)?;
            let pi = dmap_stationary(&d2, self.beta)?;
            let theta = edge_phases(self.cloud, self.weighted, self.beta)?;
            let op = magnetic_operator(&p, &theta)?;
            let assembled = op.to_complex().map(|z| z.norm());

            let h = conjugate_hermitize(&op, &pi)?;
            let herm = (&h - h.adjoint()).map(|z| z.norm()).amax();
            let schur = Schur::try_new(h.clone(), f64::EPSILON, 100_000)
                .ok_or(Error::EigenFailure)?;
            let imag = schur.unpack().1.diagonal().map(|z: Complex<f64>| z.im.abs()).amax();

            let trivial = magnetic_operator(&p, &DMatrix::zeros(p.len(), p.len()))?;
            let (_, zero_current) = magnetic_flux(&pi, &trivial)?;
            let (_, current) = magnetic_flux(&pi, &op)?;

            let a_plus = attention_forward(&self.weighted_bd, self.beta)?;
            let pi_plus = stationary_distribution(&a_plus, STATIONARY_TOL, SOLVER_MAX_ITER)?;
            let gauge = attention_gauge(&pi_plus, &a_plus)?;
            let eq_gauge = attention_gauge(&pi, &p)?;
            Ok(vec![
                Check::at_most(
                    "stored magnitudes = P+",
                    max_abs_diff(op.magnitudes().values(), p.values()),
                    0.0,
                ),
                Check::at_most("|assembled entries| = P+", max_abs_diff(&assembled, p.values()), 1e-15),
                Check::at_most("conjugated operator Hermitian", herm, 1e-10),
                Check::at_most("eigenvalue imaginary residue (Schur)", imag, 1e-10),
                Check::at_most("theta = 0 gives zero magnetic current", zero_current.amax(), 0.0),
                Check::at_most("magnetic current antisymmetric", antisymmetry_violation(&current), 1e-12),
                Check::at_most("attention log-flux antisymmetric", antisymmetry_violation(&gauge), 1e-15),
                Check::at_most("log-flux vanishes under detailed balance", eq_gauge.amax(), 1e-12),
            ])
        });
        c.finish()
    }

    fn spectral(&self) -> CriterionResult {
        let mut c = Criterion::new(13, "spectral structure");
        c.attempt("reversible spectra", 1e-8, || {
            let p = dmap(&self.d2, self.beta)?;
            let pi = dmap_stationary(&self.d2, self.beta)?;
            let mut checks = reversible_spectrum_checks("dmap", &p, &pi)?;
            let bi = dmap_bistochastic(&self.d2, self.beta, 1e-13, SOLVER_MAX_ITER)?;
            let bi_row = StochasticOperator::new(bi.into_values(), Stochasticity::Row, 1e-12)?;
            let uniform = DVector::from_element(p.len(), 1.0 / p.len() as f64);
            checks.extend(reversible_spectrum_checks("bistochastic dmap", &bi_row, &uniform)?);
            let bridge = dmap_as_bridge(&self.d2, self.beta)?;
            checks.extend(reversible_spectrum_checks(
                "EQ bridge forward",
                &bridge.forward,
                &bridge.mu_plus,
            )?);
            Ok(checks)
        });

        c.attempt("nonreversible spectra", 1e-10, || {
            let a = attention_forward(&self.weighted_bd, self.beta)?;
            let back = attention_backward(&self.weighted_bd, self.beta)?;
            let back_row = back.values().transpose();
            let mut checks = Vec::new();
            for (label, m) in [("A+", a.values().clone()), ("(A-)^T", back_row)] {
                let ev = m.complex_eigenvalues();
                let top = ev.iter().map(|z| z.norm()).fold(0.0, f64::max);
                checks.push(Check::at_most(
                    format!("|lambda| <= 1 and max |lambda| = 1 ({label})"),
                    (top - 1.0).abs(),
                    1e-10,
                ));
            }
            Ok(checks)
        });

        c.attempt("two-point spectrum", 1e-12, || {
            let r = self.cloud.points();
            let pair = DataCloud::new(DMatrix::from_fn(2, r.ncols(), |i, j| r[(i, j)]))?;
            let d2 = squared_distance(&bidivergence(&gram(&pair)));
            let p = dmap(&d2, self.beta)?;
            let pi = dmap_stationary(&d2, self.beta)?;
            let dec = decompose(&conjugate_symmetrize(&p, &pi)?, &pi)?;
            let e = (-self.beta * d2[(0, 1)]).exp();
            Ok(Check::at_most(
                "2-point lambda_2 = (1 - e^{-beta d}) / (1 + e^{-beta d})",
                (dec.eigenvalues[1] - (1.0 - e) / (1.0 + e)).abs(),
                1e-12,
            ))
        });

        c.attempt("two-cluster embedding", 0.0, || {
            let fixture = two_cluster_fixture();
            let d2 = squared_distance(&bidivergence(&gram(&fixture)));
            let p = dmap(&d2, TWO_CLUSTER_BETA)?;
            let pi = dmap_stationary(&d2, TWO_CLUSTER_BETA)?;
            let dec = decompose(&conjugate_symmetrize(&p, &pi)?, &pi)?;
            let emb = diffusion_embedding(&dec, 1.0, 2)?;
            let again = diffusion_embedding(&decompose(&conjugate_symmetrize(&p, &pi)?, &pi)?, 1.0, 2)?;
            let first = emb.coordinates.column(0);
            let left = first.rows(0, 4);
            let right = first.rows(4, 4);
            let separated = (left.max() < 0.0 && right.min() > 0.0)
                || (left.min() > 0.0 && right.max() < 0.0);
            Ok(vec![
                Check::holds("first coordinate separates the two clusters (8-point fixture)", separated),
                Check::holds("repeated decomposition is bitwise identical", emb == again),
            ])
        });

        c.attempt("magnetic spectrum", 1e-10, || {
            let d2 = squared_distance(&self.weighted_bd);
            let p = dmap(&d2, self.beta)?;
            let pi = dmap_stationary(&d2, self.beta)?;
            let theta = edge_phases(self.cloud, self.weighted, self.beta)?;
            let h = conjugate_hermitize(&magnetic_operator(&p, &theta)?, &pi)?;
            let dec = decompose_hermitian(&h, &pi)?;
            let out_of_range = dec
                .eigenvalues
                .iter()
                .map(|l| (l.abs() - 1.0).max(0.0))
                .fold(0.0, f64::max);
            Ok(Check::at_most("magnetic eigenvalues in [-1, 1]", out_of_range, 1e-10))
        });
        c.finish()
    }
}


fn reversible_spectrum_checks(
    label: &str,
    p: &StochasticOperator,
    pi: &DVector<f64>,
) -> Result<Vec<Check>> {
    let n = p.len();
    let sym = conjugate_symmetrize(p, pi)?;
    let dec = decompose(&sym, pi)?;
    let out_of_range = dec
        .eigenvalues
        .iter()
        .map(|l| (l.abs() - 1.0).max(0.0))
        .fold(0.0, f64::max);
    let top_vec = dec.right_vectors.column(0);
    let constant = top_vec.iter().map(|v| (v - top_vec[0]).abs()).fold(0.0, f64::max);

    // general nonsymmetric eigenvalues of P+ as an independent oracle
    let mut general: Vec<f64> = p.values().complex_eigenvalues().iter().map(|z| z.re).collect();
    general.sort_by(|a, b| b.total_cmp(a));
    let spectrum_gap = general
        .iter()
        .zip(dec.eigenvalues.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let biorth = (dec.left_vectors.transpose() * &dec.right_vectors - DMatrix::identity(n, n)).amax();
    let recon = (&dec.right_vectors
        * DMatrix::from_diagonal(&dec.eigenvalues)
        * dec.left_vectors.transpose()
        - p.values())
    .amax();
    Ok(vec![
        Check::at_most(format!("eigenvalues in [-1, 1] ({label})"), out_of_range, 1e-10),
        Check::at_most(format!("lambda_1 = 1 ({label})"), (dec.eigenvalues[0] - 1.0).abs(), 1e-10),
        Check::at_most(format!("top right eigenvector constant ({label})"), constant, 1e-8),
        Check::at_most(format!("conjugation preserves spectrum ({label})"), spectrum_gap, 1e-8),
        Check::at_most(format!("left/right biorthogonality ({label})"), biorth, 1e-8),
        Check::at_most(format!("reconstruction ({label})"), recon, 1e-8),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_cloud(n: usize, d: usize, seed: u64) -> DataCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DataCloud::new(normal_matrix(&mut rng, n, d, 1.0)).unwrap()
    }

    fn failures(report: &VerificationReport) -> Vec<String> {
        report
            .criteria
            .iter()
            .flat_map(|c| c.checks.iter().filter(|k| !k.passed).map(move |k| {
                format!("C{} {}: {} vs {}", c.id, k.name, k.value, k.tolerance)
            }))
            .collect()
    }

    #[test]
    fn passes_on_random_cloud() {
        let report = verify(&seeded_cloud(12, 3, 1), 1.0, None).unwrap();
        assert_eq!(report.criteria.len(), 13);

        assert!(report.passed, "{:#?}", failures(&report));
    }

    #[test]
    fn one_dimensional_input_uses_fixture() {
        let report = verify(&seeded_cloud(6, 1, 2), 0.5, None).unwrap();
        assert!(report.passed, "{:#?}", failures(&report));
        let c11 = report.criterion(11).unwrap();
        assert!(c11.checks.iter().any(|k| k.name.contains("fixture")));
    }

    #[test]
    fn deterministic() {
        let cloud = seeded_cloud(10, 2, 3);
        assert_eq!(verify(&cloud, 1.0, None).unwrap(), verify(&cloud, 1.0, None).unwrap());
    }

    #[test]
    fn weight_dimension_checked() {
        let w = InteractionWeights::identity(3);
        assert!(verify(&seeded_cloud(5, 2, 4), 1.0, Some(&w)).is_err());
    }
}

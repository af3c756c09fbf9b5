//! Command pipelines. Each returns the JSON report; matrices are written
//! as a side effect.

use std::path::{Path, PathBuf};

use markov_geometry::bridges::{
    attention_gauge, classify_regime, dmap_stationary, magnetic_flux, solve_bridge_log,
    stationary_distribution, RegimeReport,
};
use markov_geometry::geometry::{
    bidivergence, edge_phases, generalized_gram, gram, median_inverse_bandwidth, squared_distance,
};
use markov_geometry::operators::{
    antisymmetry_violation, attention_backward, attention_bistochastic, attention_forward,
    directional_kernels, dmap, dmap_bistochastic, laplacians, magnetic_operator, rbf_kernel,
    Direction,
};
use markov_geometry::spectral::{
    conjugate_hermitize, conjugate_symmetrize, decompose, decompose_hermitian, diffusion_embedding,
};
use markov_geometry::verify::verify;
use markov_geometry::{
    Bidivergence, DataCloud, InteractionWeights, StochasticOperator, Stochasticity,
};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use crate::args::{
    AttentionArgs, AttentionVariant, Beta, BridgeArgs, BridgeKernel, ClassifyArgs, CloudArgs,
    Command, DmapArgs, EmbedArgs, Gauge, KernelArgs, KernelVariant, MagneticArgs, MarginalSource,
    Normalization, Side, VerifyArgs,
};
use crate::error::{CliError, Context};
use crate::io;

/// Stochasticity and detailed-balance checks on emitted operators.
const OPERATOR_TOL: f64 = 1e-12;

/// Power-iteration tolerance for `stationary` marginals. Currents at a
/// loosely converged law would sit near the EQ threshold.
pub const STATIONARY_TOL: f64 = 1e-14;

/// Runs `command`, writes its outputs and returns the report together
/// with the report destination.
pub fn run(command: &Command) -> Result<(Value, Option<PathBuf>), CliError> {
    match command {
        Command::Dmap(a) => Ok((run_dmap(a)?, a.output.report.clone())),
        Command::Attention(a) => Ok((run_attention(a)?, a.output.report.clone())),
        Command::Kernel(a) => Ok((run_kernel(a)?, a.output.report.clone())),
        Command::Bridge(a) => Ok((run_bridge(a)?, a.output.report.clone())),
        Command::Classify(a) => Ok((run_classify(a)?, a.report.clone())),
        Command::Magnetic(a) => Ok((run_magnetic(a)?, a.output.report.clone())),
        Command::Embed(a) => Ok((run_embed(a)?, a.output.report.clone())),
        Command::Verify(a) => Ok((run_verify(a)?, a.report.clone())),
    }
}

/// `{"value": v, "tolerance": t, "passed": v <= t}`.
fn residual(value: f64, tolerance: f64) -> Value {
    json!({ "value": value, "tolerance": tolerance, "passed": value <= tolerance })
}

fn vector(v: &DVector<f64>) -> Value {
    json!(v.as_slice())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

struct Geometry {
    cloud: DataCloud,
    weights: Option<InteractionWeights>,
    bidiv: Bidivergence,
    d2: DMatrix<f64>,
    beta: f64,
}

impl Geometry {
    fn load(args: &CloudArgs, command: &'static str) -> Result<Self, CliError> {
        let points = io::read_matrix(&args.input, args.skip_header)?;
        let cloud = DataCloud::new(points).map_err(|e| CliError::input(&args.input, e.to_string()))?;
        let weights = match (&args.weights, &args.query, &args.key) {
            (Some(w), _, _) => {
                let m = io::read_matrix(w, args.skip_header)?;
                Some(InteractionWeights::new(m).map_err(|e| CliError::input(w, e.to_string()))?)
            }
            (None, Some(q), Some(k)) => {
                let qm = io::read_matrix(q, args.skip_header)?;
                let km = io::read_matrix(k, args.skip_header)?;
                Some(
                    InteractionWeights::from_factors(qm, km)
                        .map_err(|e| CliError::input(q, e.to_string()))?,
                )
            }
            _ => None,
        };
        let g = match &weights {
            Some(w) => generalized_gram(&cloud, w).during(command)?,
            None => gram(&cloud),
        };
        let bidiv = bidivergence(&g);
        let d2 = squared_distance(&bidiv);
        let beta = match args.beta {
            Beta::Value(b) => b,
            Beta::Auto => {
                let b = median_inverse_bandwidth(&d2).during(command)?;
                log::info!("beta auto-resolved to {b}");
                b
            }
        };
        log::debug!("loaded {} samples in {} dimensions", cloud.len(), cloud.dim());
        Ok(Self {
            cloud,
            weights,
            bidiv,
            d2,
            beta,
        })
    }

    fn config(&self, args: &CloudArgs) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("input".into(), json!(path_str(&args.input)));
        if let Some(w) = &args.weights {
            m.insert("weights".into(), json!(path_str(w)));
        }
        if let (Some(q), Some(k)) = (&args.query, &args.key) {
            m.insert("query".into(), json!(path_str(q)));
            m.insert("key".into(), json!(path_str(k)));
        }
        m.insert("beta".into(), json!(args.beta));
        m.insert("beta_resolved".into(), json!(self.beta));
        m.insert("samples".into(), json!(self.cloud.len()));
        m.insert("features".into(), json!(self.cloud.dim()));
        m
    }
}

fn report(command: &str, config: Map<String, Value>, outputs: Value, results: Value) -> Value {
    json!({
        "command": command,
        "config": config,
        "outputs": outputs,
        "results": results,
    })
}

fn max_current(p: &StochasticOperator, pi: &DVector<f64>) -> f64 {
    let v = p.values();
    let n = p.len();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((pi[i] * v[(i, j)] - pi[j] * v[(j, i)]).abs());
        }
    }
    worst
}

fn run_dmap(a: &DmapArgs) -> Result<Value, CliError> {
    let geo = Geometry::load(&a.cloud, "dmap")?;
    let mut config = geo.config(&a.cloud);
    config.insert("normalization".into(), json!(a.normalization));
    let mut results = Map::new();
    let mut outputs = Map::new();
    let p = match a.normalization {
        Normalization::Row => {
            let p = dmap(&geo.d2, geo.beta).during("dmap")?;
            let pi = dmap_stationary(&geo.d2, geo.beta).during("dmap")?;
            let moved = p.values().tr_mul(&pi);
            results.insert("stationarity_residual".into(), residual((moved - &pi).amax(), OPERATOR_TOL));
            results.insert("detailed_balance_residual".into(), residual(max_current(&p, &pi), OPERATOR_TOL));
            let path = io::sibling(&a.output.out, "stationary");
            io::save_vector(&path, &pi)?;
            outputs.insert("stationary".into(), json!(path_str(&path)));
            p
        }
        Normalization::Bistochastic => {
            config.insert("tol".into(), json!(a.solver.tol));
            config.insert("max_iter".into(), json!(a.solver.max_iter));
            let p = dmap_bistochastic(&geo.d2, geo.beta, a.solver.tol, a.solver.max_iter)
                .during("dmap")?;
            results.insert("column_sum_residual".into(), residual(p.column_residual(), a.solver.tol));
            p
        }
    };
    let row_tol = match a.normalization {
        Normalization::Row => OPERATOR_TOL,
        Normalization::Bistochastic => a.solver.tol,
    };
    results.insert("row_sum_residual".into(), residual(p.row_residual(), row_tol));
    io::save_matrix(&a.output.out, p.values())?;
    outputs.insert("operator".into(), json!(path_str(&a.output.out)));
    Ok(report("dmap", config, Value::Object(outputs), Value::Object(results)))
}

fn run_attention(a: &AttentionArgs) -> Result<Value, CliError> {
    let geo = Geometry::load(&a.cloud, "attention")?;
    let mut config = geo.config(&a.cloud);
    config.insert("variant".into(), json!(a.variant));
    let mut results = Map::new();
    let op = match a.variant {
        AttentionVariant::Fwd => {
            let op = attention_forward(&geo.bidiv, geo.beta).during("attention")?;
            results.insert("row_sum_residual".into(), residual(op.row_residual(), OPERATOR_TOL));
            op
        }
        AttentionVariant::Bwd => {
            let op = attention_backward(&geo.bidiv, geo.beta).during("attention")?;
            results.insert("column_sum_residual".into(), residual(op.column_residual(), OPERATOR_TOL));
            op
        }
        AttentionVariant::Bistochastic => {
            config.insert("direction".into(), json!(a.direction));
            config.insert("tol".into(), json!(a.solver.tol));
            config.insert("max_iter".into(), json!(a.solver.max_iter));
            let dir = match a.direction {
                Side::Fwd => Direction::Forward,
                Side::Bwd => Direction::Backward,
            };
            let op = attention_bistochastic(&geo.bidiv, geo.beta, dir, a.solver.tol, a.solver.max_iter)
                .during("attention")?;
            results.insert("row_sum_residual".into(), residual(op.row_residual(), a.solver.tol));
            results.insert("column_sum_residual".into(), residual(op.column_residual(), a.solver.tol));
            op
        }
    };
    results.insert("kind".into(), json!(op.kind()));
    io::save_matrix(&a.output.out, op.values())?;
    let outputs = json!({ "operator": path_str(&a.output.out) });
    Ok(report("attention", config, outputs, Value::Object(results)))
}

fn run_kernel(a: &KernelArgs) -> Result<Value, CliError> {
    let geo = Geometry::load(&a.cloud, "kernel")?;
    let mut config = geo.config(&a.cloud);
    config.insert("variant".into(), json!(a.variant));
    config.insert("laplacians".into(), json!(a.laplacians));
    let mut outputs = Map::new();
    let mut results = Map::new();
    let rbf = rbf_kernel(&geo.d2, geo.beta).during("kernel")?;
    let values = match a.variant {
        KernelVariant::Rbf => rbf.values.clone(),
        KernelVariant::Fwd => directional_kernels(&geo.bidiv, geo.beta).during("kernel")?.0,
        KernelVariant::Bwd => directional_kernels(&geo.bidiv, geo.beta).during("kernel")?.1,
    };
    io::save_matrix(&a.output.out, &values)?;
    outputs.insert("kernel".into(), json!(path_str(&a.output.out)));
    if a.laplacians {
        let lap = laplacians(&rbf).during("kernel")?;
        let ones = DVector::from_element(geo.cloud.len(), 1.0);
        let scale = lap.degrees.amax().max(1.0);
        results.insert(
            "combinatorial_null_residual".into(),
            residual((&lap.combinatorial * &ones).amax(), OPERATOR_TOL * scale),
        );
        results.insert(
            "random_walk_null_residual".into(),
            residual((&lap.random_walk * &ones).amax(), OPERATOR_TOL),
        );
        for (name, m) in [("combinatorial", &lap.combinatorial), ("random_walk", &lap.random_walk)] {
            let path = io::sibling(&a.output.out, name);
            io::save_matrix(&path, m)?;
            outputs.insert(name.into(), json!(path_str(&path)));
        }
        let path = io::sibling(&a.output.out, "degrees");
        io::save_vector(&path, &lap.degrees)?;
        outputs.insert("degrees".into(), json!(path_str(&path)));
    }
    Ok(report("kernel", config, Value::Object(outputs), Value::Object(results)))
}

fn regime_json(r: &RegimeReport) -> Value {
    json!({
        "regime": r.regime.label(),
        "marginal_gap": r.marginal_gap,
        "stationarity_residual": r.stationarity_residual,
        "max_current": r.max_current,
        "current_threshold": r.current_threshold,
    })
}

fn marginal(
    source: &MarginalSource,
    skip_header: bool,
    stationary: &dyn Fn() -> Result<DVector<f64>, CliError>,
) -> Result<DVector<f64>, CliError> {
    match source {
        MarginalSource::Stationary => stationary(),
        MarginalSource::File(p) => io::read_marginal(p, skip_header),
    }
}

fn run_bridge(a: &BridgeArgs) -> Result<Value, CliError> {
    let geo = Geometry::load(&a.cloud, "bridge")?;
    let mut config = geo.config(&a.cloud);
    config.insert("kernel".into(), json!(a.kernel));
    config.insert("mu_plus".into(), json!(a.mu_plus.describe()));
    config.insert("mu_minus".into(), json!(a.mu_minus.describe()));
    config.insert("tol".into(), json!(a.solver.tol));
    config.insert("max_iter".into(), json!(a.solver.max_iter));

    let log_kernel = match a.kernel {
        BridgeKernel::Rbf => &geo.d2 * -geo.beta,
        BridgeKernel::Attention => &geo.bidiv.fwd * -geo.beta,
    };
    let stationary = || -> Result<DVector<f64>, CliError> {
        match a.kernel {
            BridgeKernel::Rbf => dmap_stationary(&geo.d2, geo.beta).during("bridge"),
            BridgeKernel::Attention => {
                let op = attention_forward(&geo.bidiv, geo.beta).during("bridge")?;
                stationary_distribution(&op, STATIONARY_TOL, a.solver.max_iter).during("bridge")
            }
        }
    };
    let mu_plus = marginal(&a.mu_plus, a.cloud.skip_header, &stationary)?;
    let mu_minus = marginal(&a.mu_minus, a.cloud.skip_header, &stationary)?;
    let sol = solve_bridge_log(&log_kernel, &mu_plus, &mu_minus, a.solver.tol, a.solver.max_iter)
        .during("bridge")?;
    let regime = classify_regime(&sol.forward, &mu_plus, &mu_minus, a.solver.tol).during("bridge")?;

    let mut outputs = Map::new();
    io::save_matrix(&a.output.out, &sol.coupling)?;
    outputs.insert("coupling".into(), json!(path_str(&a.output.out)));
    let forward = io::sibling(&a.output.out, "forward");
    io::save_matrix(&forward, sol.forward.values())?;
    outputs.insert("forward".into(), json!(path_str(&forward)));
    for (name, v) in [("u_plus", &sol.potentials.u), ("u_minus", &sol.potentials.v)] {
        let path = io::sibling(&a.output.out, name);
        io::save_vector(&path, v)?;
        outputs.insert(name.into(), json!(path_str(&path)));
    }

    let results = json!({
        "iterations": sol.potentials.iterations,
        "marginal_residual": residual(sol.marginal_residual(), a.solver.tol),
        "propagation_residual": residual(sol.propagation_residual(), a.solver.tol),
        "forward_row_sum_residual": residual(sol.forward.row_residual(), OPERATOR_TOL),
        "classification": regime_json(&regime),
    });
    Ok(report("bridge", config, Value::Object(outputs), results))
}

fn run_classify(a: &ClassifyArgs) -> Result<Value, CliError> {
    let m = io::read_matrix(&a.operator, a.skip_header)?;
    let p = StochasticOperator::new(m, Stochasticity::Row, a.solver.tol)
        .map_err(|e| CliError::input(&a.operator, e.to_string()))?;
    let stationary = || stationary_distribution(&p, STATIONARY_TOL, a.solver.max_iter).during("classify");
    let mu_plus = marginal(&a.mu_plus, a.skip_header, &stationary)?;
    let mu_minus = marginal(&a.mu_minus, a.skip_header, &stationary)?;
    let regime = classify_regime(&p, &mu_plus, &mu_minus, a.solver.tol).during("classify")?;
    let mut config = Map::new();
    config.insert("operator".into(), json!(path_str(&a.operator)));
    config.insert("mu_plus".into(), json!(a.mu_plus.describe()));
    config.insert("mu_minus".into(), json!(a.mu_minus.describe()));
    config.insert("tol".into(), json!(a.solver.tol));
    config.insert("max_iter".into(), json!(a.solver.max_iter));
    let mut results = regime_json(&regime);
    if let Some(pi) = &regime.stationary {
        results["stationary"] = vector(pi);
    }
    Ok(report("classify", config, json!({}), results))
}

fn run_magnetic(a: &MagneticArgs) -> Result<Value, CliError> {
    let geo = Geometry::load(&a.cloud, "magnetic")?;
    let mut config = geo.config(&a.cloud);
    config.insert("gauge".into(), json!(a.gauge));
    let p = dmap(&geo.d2, geo.beta).during("magnetic")?;
    let pi = dmap_stationary(&geo.d2, geo.beta).during("magnetic")?;
    let theta = match a.gauge {
        Gauge::Qk => {
            let identity;
            let w = match &geo.weights {
                Some(w) => w,
                None => {
                    log::warn!("no interaction matrix given; qk phases of the identity vanish");
                    identity = InteractionWeights::identity(geo.cloud.dim());
                    &identity
                }
            };
            edge_phases(&geo.cloud, w, geo.beta).during("magnetic")?
        }
        Gauge::Attention => {
            config.insert("tol".into(), json!(a.solver.tol));
            config.insert("max_iter".into(), json!(a.solver.max_iter));
            let att = attention_forward(&geo.bidiv, geo.beta).during("magnetic")?;
            let pi_plus = stationary_distribution(&att, STATIONARY_TOL, a.solver.max_iter)
                .during("magnetic")?;
            attention_gauge(&pi_plus, &att).during("magnetic")?
        }
    };
    let op = magnetic_operator(&p, &theta).during("magnetic")?;
    let (_, current) = magnetic_flux(&pi, &op).during("magnetic")?;
    let h = conjugate_hermitize(&op, &pi).during("magnetic")?;
    let hermiticity = (&h - h.adjoint()).map(|z| z.norm()).amax();
    let dec = decompose_hermitian(&h, &pi).during("magnetic")?;

    let mut outputs = Map::new();
    io::save_matrix(&a.output.out, op.magnitudes().values())?;
    outputs.insert("magnitude".into(), json!(path_str(&a.output.out)));
    let phase = io::sibling(&a.output.out, "phase");
    io::save_matrix(&phase, op.phases())?;
    outputs.insert("phase".into(), json!(path_str(&phase)));
    let cur = io::sibling(&a.output.out, "current");
    io::save_matrix(&cur, &current)?;
    outputs.insert("current".into(), json!(path_str(&cur)));

    let results = json!({
        "hermiticity_residual": residual(hermiticity, 1e-10),
        "phase_antisymmetry": residual(antisymmetry_violation(op.phases()), 1e-12),
        "current_antisymmetry": residual(antisymmetry_violation(&current), 1e-12),
        "max_current": current.amax(),
        "eigenvalues": vector(&dec.eigenvalues),
        "degenerate": dec.degenerate,
    });
    Ok(report("magnetic", config, Value::Object(outputs), results))
}

fn run_embed(a: &EmbedArgs) -> Result<Value, CliError> {
    let geo = Geometry::load(&a.cloud, "embed")?;
    let mut config = geo.config(&a.cloud);
    config.insert("t".into(), json!(a.t));
    config.insert("k".into(), json!(a.k));
    let p = dmap(&geo.d2, geo.beta).during("embed")?;
    let pi = dmap_stationary(&geo.d2, geo.beta).during("embed")?;
    let dec = decompose(&conjugate_symmetrize(&p, &pi).during("embed")?, &pi).during("embed")?;
    if dec.degenerate {
        log::warn!("repeated eigenvalues; coordinates within a repeated block are in solver order");
    }
    let emb = diffusion_embedding(&dec, a.t, a.k).during("embed")?;
    io::save_matrix(&a.output.out, &emb.coordinates)?;
    let eig = io::sibling(&a.output.out, "eigenvalues");
    io::save_vector(&eig, &dec.eigenvalues)?;
    let outputs = json!({
        "coordinates": path_str(&a.output.out),
        "eigenvalues": path_str(&eig),
    });
    let results = json!({
        "eigenvalues": vector(&dec.eigenvalues),
        "degenerate": dec.degenerate,
    });
    Ok(report("embed", config, outputs, results))
}

fn run_verify(a: &VerifyArgs) -> Result<Value, CliError> {
    let geo = Geometry::load(&a.cloud, "verify")?;
    let config = geo.config(&a.cloud);
    let result = verify(&geo.cloud, geo.beta, geo.weights.as_ref()).during("verify")?;
    let failed = result.criteria.iter().filter(|c| !c.passed).count();
    let summary: Vec<Value> = result
        .criteria
        .iter()
        .map(|c| json!({ "id": c.id, "title": c.title, "passed": c.passed }))
        .collect();
    for c in &result.criteria {
        log::info!("criterion {:>2} {}: {}", c.id, if c.passed { "PASS" } else { "FAIL" }, c.title);
    }
    let results = json!({
        "passed": result.passed,
        "failed": failed,
        "summary": summary,
        "criteria": serde_json::to_value(&result.criteria).expect("serializable criteria"),
    });
    Ok(report("verify", config, json!({}), results))
}

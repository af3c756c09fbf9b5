//! Library results against brute-force reference computations that share
//! no code with the crate.

use approx::assert_abs_diff_eq;
use markov_geometry::bridges::{
    attention_bridge, attention_gauge, classify_regime, currents, dmap_as_bridge,
    dmap_stationary, doob_transform, sb_factorization_check, solve_bridge, stationary_distribution,
    Regime,
};
use markov_geometry::geometry::{bidivergence, generalized_gram, gram, squared_distance};
use markov_geometry::normalize::{poe_combine, sinkhorn, softmax_rows};
use markov_geometry::operators::{attention_forward, dmap, dmap_bistochastic};
use markov_geometry::spectral::{
    conjugate_hermitize, conjugate_symmetrize, decompose, decompose_hermitian,
    diffusion_embedding,
};
use markov_geometry::{DataCloud, InteractionWeights};
use nalgebra::{dmatrix, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_marginal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.random_range(0.2..1.0));
    let s = v.sum();
    v / s
}

fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// `sum_a sum_b R_ia W_ab R_jb` by explicit loops.
fn gram_oracle(r: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = r.shape();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for a in 0..d {
                for b in 0..d {
                    acc += r[(i, a)] * w[(a, b)] * r[(j, b)];
                }
            }
            g[(i, j)] = acc;
        }
    }
    g
}

/// Naive exp / sum softmax, no stabilization.
fn softmax_oracle(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = z.map(f64::exp);
    for i in 0..out.nrows() {
        let s: f64 = (0..out.ncols()).map(|j| out[(i, j)]).sum();
        for j in 0..out.ncols() {
            out[(i, j)] /= s;
        }
    }
    out
}

/// Linear-domain Sinkhorn-Knopp with a fixed iteration count.
fn sinkhorn_oracle(k: &DMatrix<f64>, iters: usize) -> DMatrix<f64> {
    let mut m = k.clone();
    for _ in 0..iters {
        for mut row in m.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        for mut col in m.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
    }
    m
}

/// Linear-domain iterative proportional fitting for the two marginals.
fn ipf_oracle(k: &DMatrix<f64>, mu_p: &DVector<f64>, mu_m: &DVector<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    let mut u = DVector::from_element(n, 1.0);
    let mut v = DVector::from_element(n, 1.0);
    for _ in 0..20_000 {
        let kv = k * &v;
        u = mu_p.component_div(&kv);
        let ku = k.tr_mul(&u);
        v = mu_m.component_div(&ku);
    }
    DMatrix::from_fn(n, n, |i, j| u[i] * k[(i, j)] * v[j])
}

/// Stationary distribution from the linear system `(P^T - I) pi = 0`,
/// `sum pi = 1`.
fn stationary_oracle(p: &DMatrix<f64>) -> DVector<f64> {
    let n = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(n, n);
    let mut b = DVector::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    b[n - 1] = 1.0;
    a.lu().solve(&b).unwrap()
}

#[test]
fn plain_gram_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = random(&mut rng, 4, 3);
    let cloud = DataCloud::new(r.clone()).unwrap();
    let g = gram(&cloud);
    assert!(max_diff(g.values(), &gram_oracle(&r, &DMatrix::identity(3, 3))) <= 1e-14);
}

#[test]
fn generalized_gram_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let r = random(&mut rng, 5, 3);
    let w = random(&mut rng, 3, 3);
    let cloud = DataCloud::new(r.clone()).unwrap();
    let g = generalized_gram(&cloud, &InteractionWeights::new(w.clone()).unwrap()).unwrap();
    assert!(max_diff(g.values(), &gram_oracle(&r, &w)) <= 1e-14);
}

#[test]
fn squared_distance_matches_pairwise_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let r = random(&mut rng, 6, 4);
    let d2 = squared_distance(&bidivergence(&gram(&DataCloud::new(r.clone()).unwrap())));
    for i in 0..6 {
        for j in 0..6 {
            let direct: f64 = (0..4).map(|a| (r[(i, a)] - r[(j, a)]).powi(2)).sum();
            assert_abs_diff_eq!(d2[(i, j)], direct, epsilon = 1e-12);
        }
    }
}

#[test]
fn attention_matches_query_key_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let r = random(&mut rng, 4, 3);
    let wq = random(&mut rng, 3, 2);
    let wk = random(&mut rng, 3, 2);
    let cloud = DataCloud::new(r.clone()).unwrap();
    let w = InteractionWeights::from_factors(wq.clone(), wk.clone()).unwrap();
    let bd = bidivergence(&generalized_gram(&cloud, &w).unwrap());
    let q = &r * &wq;
    let k = &r * &wk;
    for beta in [0.1, 1.0, 10.0] {
        let a = attention_forward(&bd, beta).unwrap();
        let logits = DMatrix::from_fn(4, 4, |i, j| {
            beta * (0..2).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>()
        });
        assert!(max_diff(a.values(), &softmax_oracle(&logits)) <= 1e-12);
    }
}

#[test]
fn poe_matches_direct_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let z = random(&mut rng, 3, 3);
    let s = random(&mut rng, 3, 3);
    let combined = poe_combine(&softmax_rows(&z), &softmax_rows(&s)).unwrap();
    assert!(max_diff(combined.values(), &softmax_oracle(&(&z + &s))) <= 1e-12);
}

#[test]
fn sinkhorn_matches_linear_domain_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let z = random(&mut rng, 6, 6);
    let (a, _) = sinkhorn(&z, 1e-13, 100_000).unwrap();
    assert!(max_diff(a.values(), &sinkhorn_oracle(&z.map(f64::exp), 5_000)) <= 1e-12);

    let k = dmatrix![2.0, 1.0; 1.0, 2.0];
    let (two, _) = sinkhorn(&k.map(f64::ln), 1e-14, 1000).unwrap();
    assert!(max_diff(two.values(), &dmatrix![2.0 / 3.0, 1.0 / 3.0; 1.0 / 3.0, 2.0 / 3.0]) <= 1e-10);
    assert!(max_diff(two.values(), &sinkhorn_oracle(&k, 200)) <= 1e-14);
}

#[test]
fn bistochastic_dmap_two_points_analytic() {
    let d2 = dmatrix![0.0, 1.7; 1.7, 0.0];
    let p = dmap_bistochastic(&d2, 0.8, 1e-14, 1000).unwrap();
    let a = 1.0 / (1.0 + (-0.8f64 * 1.7).exp());
    assert!(max_diff(p.values(), &dmatrix![a, 1.0 - a; 1.0 - a, a]) <= 1e-12);
}

#[test]
fn bridge_matches_proportional_fitting() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for n in [3, 4] {
        let cloud = DataCloud::new(random(&mut rng, n, 2)).unwrap();
        let d2 = squared_distance(&bidivergence(&gram(&cloud)));
        let k = d2.map(|x| (-x).exp());
        let mu_p = random_marginal(&mut rng, n);
        let mu_m = random_marginal(&mut rng, n);
        let sol = solve_bridge(&k, &mu_p, &mu_m, 1e-12, 100_000).unwrap();
        assert!(sol.marginal_residual() <= 1e-10);
        assert!(max_diff(&sol.coupling, &ipf_oracle(&k, &mu_p, &mu_m)) <= 1e-10);
        let report = classify_regime(&sol.forward, &mu_p, &mu_m, 1e-9).unwrap();
        assert_eq!(report.regime, Regime::Nonstationary);
    }
}

#[test]
fn dmap_bridge_closed_form_matches_iterative_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let cloud = DataCloud::new(random(&mut rng, 7, 3)).unwrap();
    let d2 = squared_distance(&bidivergence(&gram(&cloud)));
    let closed = dmap_as_bridge(&d2, 1.3).unwrap();
    let k = d2.map(|x| (-1.3 * x).exp());
    let iterative = solve_bridge(&k, &closed.mu_plus, &closed.mu_minus, 1e-13, 100_000).unwrap();
    assert!(max_diff(&closed.coupling, &iterative.coupling) <= 1e-10);
    assert!(max_diff(&closed.coupling, &closed.reconstruct()) <= 1e-15);
}

#[test]
fn doob_transform_matches_bridge_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let cloud = DataCloud::new(random(&mut rng, 5, 2)).unwrap();
    let d2 = squared_distance(&bidivergence(&gram(&cloud)));
    let p = dmap(&d2, 0.7).unwrap();
    let k = d2.map(|x| (-0.7 * x).exp());
    let sol = solve_bridge(
        &k,
        &random_marginal(&mut rng, 5),
        &random_marginal(&mut rng, 5),
        1e-12,
        100_000,
    )
    .unwrap();
    let tilted = doob_transform(&p, &sol.potentials.v).unwrap();
    assert!(max_diff(tilted.values(), sol.forward.values()) <= 1e-10);
    // explicit h-transform P_ij h_j / (P h)_i
    let h = &sol.potentials.v;
    let ph = p.values() * h;
    let direct = DMatrix::from_fn(5, 5, |i, j| p.values()[(i, j)] * h[j] / ph[i]);
    assert!(max_diff(tilted.values(), &direct) <= 1e-14);
}

#[test]
fn sb_factorization_deviation_small() {
    let d2 = dmatrix![0.0, 2.0; 2.0, 0.0];
    let bd = markov_geometry::Bidivergence::from_parts(
        dmatrix![0.0, 1.0; 1.0, 0.0],
        dmatrix![0.0, 1.0; 1.0, 0.0],
    )
    .unwrap();
    assert_eq!(squared_distance(&bd), d2);
    assert!(sb_factorization_check(&bd, 1.0).unwrap() <= 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let bd = bidivergence(&gram(&DataCloud::new(random(&mut rng, 8, 3)).unwrap()));
    for beta in [0.1, 1.0, 10.0] {
        assert!(sb_factorization_check(&bd, beta).unwrap() <= 1e-10);
    }
}

#[test]
fn stationary_distribution_matches_linear_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cloud = DataCloud::new(random(&mut rng, 6, 3)).unwrap();
    let w = InteractionWeights::new(random(&mut rng, 3, 3)).unwrap();
    let bd = bidivergence(&generalized_gram(&cloud, &w).unwrap());
    let a = attention_forward(&bd, 1.0).unwrap();
    let pi = stationary_distribution(&a, 1e-15, 100_000).unwrap();
    assert!((&pi - stationary_oracle(a.values())).amax() <= 1e-12);

    let d2 = squared_distance(&bidivergence(&gram(&cloud)));
    let p = dmap(&d2, 1.0).unwrap();
    let closed = dmap_stationary(&d2, 1.0).unwrap();
    assert!((&closed - stationary_oracle(p.values())).amax() <= 1e-10);
    let iterated = stationary_distribution(&p, 1e-15, 100_000).unwrap();
    assert!((&closed - iterated).amax() <= 1e-10);
}

#[test]
fn dmap_currents_vanish_and_attention_circulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cloud = DataCloud::new(random(&mut rng, 6, 3)).unwrap();
    let d2 = squared_distance(&bidivergence(&gram(&cloud)));
    let p = dmap(&d2, 1.0).unwrap();
    let pi = dmap_stationary(&d2, 1.0).unwrap();
    assert!(currents(&p, &pi).unwrap().amax() <= 1e-12);
    assert_eq!(classify_regime(&p, &pi, &pi, 1e-12).unwrap().regime, Regime::Equilibrium);

    let w = InteractionWeights::new(random(&mut rng, 3, 3)).unwrap();
    let bd = bidivergence(&generalized_gram(&cloud, &w).unwrap());
    let a = attention_forward(&bd, 1.0).unwrap();
    let pi_a = stationary_distribution(&a, 1e-15, 100_000).unwrap();
    let report = classify_regime(&a, &pi_a, &pi_a, 1e-12).unwrap();
    assert_eq!(report.regime, Regime::SteadyState);
    assert!(report.max_current > 10.0 * report.current_threshold);
    let sol = attention_bridge(&bd, 1.0, &pi_a, &pi_a, 1e-13, 100_000).unwrap();
    assert!(max_diff(sol.forward.values(), a.values()) <= 1e-10);
}

#[test]
fn three_cycle_gauge_is_log_ratio() {
    // a biased 3-cycle: each node prefers the next
    let a = markov_geometry::StochasticOperator::new(
        dmatrix![0.2, 0.6, 0.2; 0.2, 0.2, 0.6; 0.6, 0.2, 0.2],
        markov_geometry::Stochasticity::Bi,
        1e-15,
    )
    .unwrap();
    let pi = DVector::from_element(3, 1.0 / 3.0);
    let theta = attention_gauge(&pi, &a).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let direct = (pi[i] * a.values()[(i, j)] / (pi[j] * a.values()[(j, i)])).ln();
            assert_abs_diff_eq!(theta[(i, j)], direct, epsilon = 1e-15);
        }
    }
    assert!(theta[(0, 1)] > 1.0);
}

#[test]
fn conjugation_preserves_spectrum_of_general_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cloud = DataCloud::new(random(&mut rng, 7, 2)).unwrap();
    let d2 = squared_distance(&bidivergence(&gram(&cloud)));
    let p = dmap(&d2, 2.0).unwrap();
    let pi = dmap_stationary(&d2, 2.0).unwrap();
    let s = conjugate_symmetrize(&p, &pi).unwrap();
    assert!(max_diff(&s, &s.transpose()) <= 1e-10);
    let dec = decompose(&s, &pi).unwrap();

    let mut general: Vec<f64> = p.values().complex_eigenvalues().iter().map(|z| z.re).collect();
    general.sort_by(|a, b| b.total_cmp(a));
    for (a, b) in general.iter().zip(dec.eigenvalues.iter()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-8);
    }
    // right eigenvectors really are eigenvectors of P
    for k in 0..7 {
        let v = dec.right_vectors.column(k);
        let pv = p.values() * v;
        assert!((pv - v * dec.eigenvalues[k]).amax() <= 1e-10);
    }
}

#[test]
fn magnetic_spectrum_is_real() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let cloud = DataCloud::new(random(&mut rng, 6, 3)).unwrap();
    let d2 = squared_distance(&bidivergence(&gram(&cloud)));
    let p = dmap(&d2, 1.0).unwrap();
    let pi = dmap_stationary(&d2, 1.0).unwrap();
    let phases = random(&mut rng, 6, 6);
    let theta = (&phases - phases.transpose()) * 0.5;
    let op = markov_geometry::operators::magnetic_operator(&p, &theta).unwrap();
    let h = conjugate_hermitize(&op, &pi).unwrap();
    let schur = nalgebra::Schur::new(h.clone());
    let (_, t) = schur.unpack();
    assert!(t.diagonal().iter().all(|z| z.im.abs() <= 1e-10));
    let dec = decompose_hermitian(&h, &pi).unwrap();
    let mut schur_re: Vec<f64> = t.diagonal().iter().map(|z| z.re).collect();
    schur_re.sort_by(|a, b| b.total_cmp(a));
    for (a, b) in schur_re.iter().zip(dec.eigenvalues.iter()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-10);
    }
}

#[test]
fn two_point_second_eigenvalue() {
    let p = dmap(&dmatrix![0.0, 1.0; 1.0, 0.0], 1.0).unwrap();
    let pi = DVector::from_element(2, 0.5);
    let dec = decompose(&conjugate_symmetrize(&p, &pi).unwrap(), &pi).unwrap();
    let e = (-1f64).exp();
    assert_abs_diff_eq!(dec.eigenvalues[1], (1.0 - e) / (1.0 + e), epsilon = 1e-12);
}

#[test]
fn two_clusters_separate_by_sign() {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for cx in [-2.0, 2.0] {
        for _ in 0..4 {
            rows.push([cx + rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]);
        }
    }
    let cloud = DataCloud::new(DMatrix::from_fn(8, 2, |i, j| rows[i][j])).unwrap();
    let d2 = squared_distance(&bidivergence(&gram(&cloud)));
    // weak but numerically nonzero coupling between the clusters
    let beta = 0.4;
    let p = dmap(&d2, beta).unwrap();
    let pi = dmap_stationary(&d2, beta).unwrap();
    let dec = decompose(&conjugate_symmetrize(&p, &pi).unwrap(), &pi).unwrap();
    assert!(dec.eigenvalues[1] < 1.0 - 1e-6);
    let emb = diffusion_embedding(&dec, 1.0, 2).unwrap();
    let first = emb.coordinates.column(0);
    let left_sign = first[0].signum();
    assert!((0..4).all(|i| first[i].signum() == left_sign));
    assert!((4..8).all(|i| first[i].signum() == -left_sign));
    // a dense general solve finds the same slow eigenvalue
    let mut general: Vec<f64> = p.values().complex_eigenvalues().iter().map(|z| z.re).collect();
    general.sort_by(|a, b| b.total_cmp(a));
    assert_abs_diff_eq!(general[1], dec.eigenvalues[1], epsilon = 1e-8);
}

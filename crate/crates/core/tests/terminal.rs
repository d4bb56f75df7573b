mod common;

use common::{bounds_1d, enumerate_vertices, interval, rand_psd, scalar_system};
use cssmpc::conic::SolveSettings;
use cssmpc::linalg::{min_eigenvalue, Mat, Vector};
use cssmpc::lp::{self, LpOutcome};
use cssmpc::polytope::Polytope;
use cssmpc::sysmodel::{ChanceSpec, ParameterHull, SystemRealization};
use cssmpc::terminal::{
    cache_key, lyapunov_margin, robust_invariant_set, robust_invariant_set_with, solve_terminal_covariance, synthesize,
    tighten, verify_invariance, Coupling, TerminalError, TerminalIngredients, TerminalOptions,
};
use cssmpc::vehicle::{build_scenario, ReferenceProfile, VehicleSetup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn integrator(a: f64) -> ParameterHull {
    ParameterHull::single(scalar_system(a, 1.0, 0.0, 0.0))
}

fn assert_interval(p: &Polytope, lo: f64, hi: f64, tol: f64) {
    let (l, h) = bounds_1d(p);
    assert!((l - lo).abs() <= tol && (h - hi).abs() <= tol, "[{l}, {h}] vs [{lo}, {hi}]");
}

#[test]
fn integrator_safe_set_is_invariant_at_once() {
    let inv = robust_invariant_set(&interval(-2.0, 2.0), &interval(-1.0, 1.0), &integrator(1.0), 100, 1e-6).unwrap();
    assert_eq!(inv.iterations, 1);
    assert_interval(&inv.set, -2.0, 2.0, 1e-12);
}

#[test]
fn unstable_with_ample_input_keeps_safe_set() {
    let inv = robust_invariant_set(&interval(-2.0, 2.0), &interval(-3.0, 3.0), &integrator(2.0), 100, 1e-6).unwrap();
    assert_interval(&inv.set, -2.0, 2.0, 1e-12);
}

#[test]
fn unstable_with_scarce_input_converges_geometrically() {
    // Iterates are [−(1 + 2^{−i}), 1 + 2^{−i}].
    let (x_safe, u_safe, hull) = (interval(-2.0, 2.0), interval(-1.0, 1.0), integrator(2.0));
    let mut omega = x_safe.clone();
    for i in 1..=5 {
        omega = omega.intersect(&cssmpc::polytope::pre_set(&omega, &hull, &u_safe));
        let r = 1.0 + 0.5f64.powi(i);
        assert_interval(&omega, -r, r, 1e-12);
    }
    let inv = robust_invariant_set(&x_safe, &u_safe, &hull, 100, 1e-6).unwrap();
    assert_interval(&inv.set, -1.0, 1.0, 1e-4);
    assert!(verify_invariance(&inv.set, &u_safe, &hull));
}

#[test]
fn budget_exhaustion_is_an_error() {
    let err = robust_invariant_set(&interval(-2.0, 2.0), &interval(-1.0, 1.0), &integrator(2.0), 3, 1e-6).unwrap_err();
    assert_eq!(err, TerminalError::NotConverged(3));
}

#[test]
fn empty_iterate_is_reported() {
    // x⁺ = x + v + 1 with |v| ≤ 0.5 drifts out of any bounded set.
    let hull = ParameterHull::single(scalar_system(1.0, 1.0, 0.0, 1.0));
    let err = robust_invariant_set(&interval(-2.0, 2.0), &interval(-0.5, 0.5), &hull, 100, 1e-6).unwrap_err();
    assert!(matches!(err, TerminalError::NoInvariantSet(_)), "{err:?}");
}

#[test]
fn verify_invariance_examples() {
    let u = interval(-1.0, 1.0);
    assert!(verify_invariance(&interval(-2.0, 2.0), &u, &integrator(1.0)));
    assert!(!verify_invariance(&interval(-2.0, 2.0), &u, &integrator(2.0)));
    assert!(verify_invariance(&interval(-1.0, 1.0), &u, &integrator(2.0)));
}

#[test]
fn per_vertex_coupling_requires_shared_input() {
    let hull = ParameterHull::new(vec![scalar_system(1.0, 1.0, 0.0, 0.0), scalar_system(1.0, 2.0, 0.0, 0.0)]).unwrap();
    assert_eq!(Coupling::Auto.resolve(&hull), Ok(Coupling::Common));
    let err = robust_invariant_set_with(&interval(-2.0, 2.0), &interval(-1.0, 1.0), &hull, 10, 1e-6, Coupling::PerVertex);
    assert_eq!(err.unwrap_err(), TerminalError::UnsharedInput);
}

#[test]
fn tightening_examples() {
    let spec = ChanceSpec::from_polytopes(
        &Polytope::boxed(&[-2.0, -2.0], &[2.0, 2.0]),
        &[0.025, 0.5, 0.025, 0.025],
        &Polytope::boxed(&[-1.0], &[1.0]),
        &[0.05, 0.05],
    )
    .unwrap();
    let (x_safe, u_safe) = tighten(&spec, &Mat::identity(2, 2), &Mat::from_row_slice(1, 2, &[-0.5, 0.0])).unwrap();
    let b = x_safe.offsets();
    // Row order of the box: upper bounds, then lower bounds.
    assert!((b[0] - (2.0 - 1.959963985)).abs() < 1e-8);
    assert!((b[1] - 2.0).abs() < 1e-15);
    assert!((u_safe.offsets()[0] - (1.0 - 0.5 * 1.644853627)).abs() < 1e-8);
}

#[test]
fn over_tightened_safe_set_is_an_error() {
    let spec = ChanceSpec::from_polytopes(&interval(-0.1, 0.1), &[0.025, 0.025], &interval(-1.0, 1.0), &[0.05, 0.05]).unwrap();
    let err = tighten(&spec, &Mat::identity(1, 1), &Mat::zeros(1, 1)).unwrap_err();
    assert_eq!(err, TerminalError::SafeSetEmpty("state"));
}

/// Two-vertex planar hull with a shared input matrix.
fn planar_instance(seed: u64) -> (ParameterHull, ChanceSpec, TerminalIngredients) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(found) = common::random_terminal_instance(&mut rng) {
            return found;
        }
    }
}

/// Every vertex of the terminal set admits, for every hull vertex, a
/// feedforward in the safe input set keeping the successor in the set.
#[test]
fn vertex_certificate_holds() {
    for seed in [1, 2, 3] {
        let (hull, _, term) = planar_instance(seed);
        assert!(term.x_f_mu.is_subset(&term.x_safe));
        let verts = enumerate_vertices(&term.x_f_mu.remove_redundancy());
        assert!(verts.len() >= 3);
        for mu in &verts {
            for v in hull.vertices() {
                assert!(one_step_feedforward(&term.x_f_mu, &term.u_safe, v, mu).is_some(), "vertex {mu} stuck");
            }
        }
    }
}

/// Feedforward `v ∈ u_safe` with `Aμ + Bv + r ∈ target`, found by an LP that
/// minimizes the largest row slack.
fn one_step_feedforward(target: &Polytope, u_safe: &Polytope, sys: &SystemRealization, mu: &Vector) -> Option<Vector> {
    let nu = sys.nu();
    let drift = &sys.a * mu + &sys.r;
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for (g, h) in target.rows() {
        let mut row: Vec<f64> = (sys.b.transpose() * &g).iter().copied().collect();
        row.push(-1.0);
        rows.push((row, h - g.dot(&drift)));
    }
    for (g, h) in u_safe.rows() {
        let mut row: Vec<f64> = g.iter().copied().collect();
        row.push(-1.0);
        rows.push((row, h));
    }
    let mut floor = vec![0.0; nu + 1];
    floor[nu] = -1.0;
    rows.push((floor, 1.0));
    let a = Mat::from_fn(rows.len(), nu + 1, |i, j| rows[i].0[j]);
    let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mut c = vec![0.0; nu + 1];
    c[nu] = -1.0;
    match lp::maximize(&c, &a, &b) {
        LpOutcome::Optimal { point, .. } if point[nu] <= 1e-7 => Some(point.rows(0, nu).into_owned()),
        _ => None,
    }
}

/// Sampled one-step chance certificate: for `μ ∈ X_f^μ` and `Σ ⪯ Σ_f`, the
/// successor under `u = v + L̃(x − μ)` has covariance below `Σ_f` and its
/// chance rows hold with the original offsets.
#[test]
fn sampled_chance_certificate_holds() {
    let (hull, spec, term) = planar_instance(4);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let verts = enumerate_vertices(&term.x_f_mu.remove_redundancy());
    for _ in 0..1000 {
        // Random convex combination of vertices.
        let w: Vec<f64> = verts.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = w.iter().sum();
        let mu = verts.iter().zip(&w).fold(Vector::zeros(2), |acc, (v, wi)| acc + v * (wi / total));
        // Σ = Σ_f^{1/2} M Σ_f^{1/2} with 0 ⪯ M ⪯ I.
        let m = rand_psd(&mut rng, 2, 1.0);
        let m = &m / (m.symmetric_eigenvalues().max() + 1e-3);
        let root = cssmpc::linalg::psd_sqrt(&term.sigma_f);
        let sigma = &root * m * &root;
        for sys in hull.vertices() {
            let v = one_step_feedforward(&term.x_f_mu, &term.u_safe, sys, &mu).expect("feedforward exists");
            for row in &spec.control_rows {
                let sd = row.normal.dot(&(&term.gain * &sigma * term.gain.transpose() * &row.normal)).sqrt();
                assert!(row.normal.dot(&v) + row.quantile() * sd <= row.offset + 1e-7);
            }
            let acl = &sys.a + &sys.b * &term.gain;
            let next_cov = &acl * &sigma * acl.transpose() + &sys.d * sys.d.transpose();
            assert!(min_eigenvalue(&(&term.sigma_f - &next_cov)) >= -1e-6);
            let next_mean = &sys.a * &mu + &sys.b * &v + &sys.r;
            assert!(term.x_f_mu.max_violation(&next_mean) <= 1e-7);
            for row in &spec.state_rows {
                let sd = row.normal.dot(&(&next_cov * &row.normal)).sqrt();
                assert!(row.normal.dot(&next_mean) + row.quantile() * sd <= row.offset + 1e-7);
            }
        }
    }
}

#[test]
fn iterates_are_monotone() {
    let (hull, _, term) = planar_instance(5);
    let mut omega = term.x_safe.clone();
    for _ in 0..10 {
        let next = omega.intersect(&cssmpc::polytope::pre_set_per_vertex(&omega, &hull, &term.u_safe));
        assert!(next.is_subset(&omega));
        omega = next;
    }
}

#[test]
fn ingredients_round_trip_through_json_and_hash_stably() {
    let (hull, spec, term) = planar_instance(6);
    let json = serde_json::to_string(&term).unwrap();
    let back: TerminalIngredients = serde_json::from_str(&json).unwrap();
    assert_eq!(back.x_f_mu, term.x_f_mu);
    assert!((back.sigma_f - &term.sigma_f).amax() == 0.0);
    let options = TerminalOptions::default();
    assert_eq!(cache_key(&hull, &spec, &options), cache_key(&hull, &spec, &options));
    let other = TerminalOptions { eps: 1e-5, ..options };
    assert_ne!(cache_key(&hull, &spec, &options), cache_key(&hull, &spec, &other));
}

#[test]
fn vehicle_covariance_certificate() {
    let sc = build_scenario(&VehicleSetup::default(), &ReferenceProfile::default_profile(60)).unwrap();
    let cov = solve_terminal_covariance(&sc.hull, &SolveSettings::default()).unwrap();
    assert!(min_eigenvalue(&cov.sigma_f) > 0.0);
    assert!(lyapunov_margin(&sc.hull, &cov.sigma_f, &cov.gain) >= -1e-6);
    for v in sc.hull.vertices() {
        assert!(min_eigenvalue(&(&cov.sigma_f - &v.d * v.d.transpose())) >= -1e-6);
    }
    let (x_safe, u_safe) = tighten(&sc.spec, &cov.sigma_f, &cov.gain).unwrap();
    assert!(x_safe.is_subset_tol(&sc.spec.state_polytope(), 1e-8));
    assert!(u_safe.is_subset_tol(&sc.spec.control_polytope(), 1e-8));
}

#[test]
fn nominal_vehicle_ingredients_are_certified() {
    let sc = build_scenario(&VehicleSetup::default(), &ReferenceProfile::default_profile(60)).unwrap();
    let hull = ParameterHull::single(sc.nominal.clone());
    let term = synthesize(&hull, &sc.spec, &TerminalOptions::default(), &SolveSettings::default()).unwrap();
    assert!(term.converged);
    assert!(verify_invariance(&term.x_f_mu, &term.u_safe, &hull));
    assert!(term.x_f_mu.is_subset_tol(&term.x_safe, 1e-8));
    assert!(term.x_safe.is_subset_tol(&sc.spec.state_polytope(), 1e-8));
}

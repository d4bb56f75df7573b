//! Random instance generators and independent oracles shared by the
//! integration tests and the acceptance report.
#![allow(dead_code)]

use cssmpc::conic::SolveSettings;
use cssmpc::linalg::{min_eigenvalue, symmetrize, Mat, Vector};
use cssmpc::polytope::Polytope;
use cssmpc::smpc::{
    build_block_matrices, build_program, gains_from_state_feedback, shift_candidate, solve_smpc, GainMode,
    SmpcOptions, SmpcOutcome, SmpcProblem,
};
use cssmpc::sysmodel::{
    normal_quantile, policy_moments, step_moments, ChanceSpec, GaussianBelief, ParameterHull, StageCost,
    SystemRealization,
};
use cssmpc::terminal::{synthesize, TerminalIngredients, TerminalOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

pub fn rand_psd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Mat {
    let m = rand_mat(rng, n, n, scale);
    symmetrize(&(&m * m.transpose()))
}

pub fn rand_system(rng: &mut ChaCha8Rng, nx: usize, nu: usize, nw: usize) -> SystemRealization {
    SystemRealization::new(
        Mat::identity(nx, nx) * 0.9 + rand_mat(rng, nx, nx, 0.3),
        rand_mat(rng, nx, nu, 1.0),
        rand_mat(rng, nx, nw, 0.2),
        rand_vec(rng, nx, 0.1),
    )
    .unwrap()
}

pub fn scalar_system(a: f64, b: f64, d: f64, r: f64) -> SystemRealization {
    SystemRealization::new(
        Mat::from_element(1, 1, a),
        Mat::from_element(1, 1, b),
        Mat::from_element(1, 1, d),
        Vector::from_element(1, r),
    )
    .unwrap()
}

pub fn interval(lo: f64, hi: f64) -> Polytope {
    Polytope::boxed(&[lo], &[hi])
}

/// `(min, max)` of a one-dimensional polytope.
pub fn bounds_1d(p: &Polytope) -> (f64, f64) {
    let hi = p.maximize(&[1.0]).value().unwrap();
    let lo = -p.maximize(&[-1.0]).value().unwrap();
    (lo, hi)
}

pub fn boxed_spec(nx: usize, nu: usize, x_lim: f64, u_lim: f64, p_x: f64, p_u: f64) -> ChanceSpec {
    let xs = Polytope::boxed(&vec![-x_lim; nx], &vec![x_lim; nx]);
    let us = Polytope::boxed(&vec![-u_lim; nu], &vec![u_lim; nu]);
    ChanceSpec::from_polytopes(&xs, &vec![p_x; xs.num_rows()], &us, &vec![p_u; us.num_rows()]).unwrap()
}

pub fn quadratic_cost(nx: usize, nu: usize) -> StageCost {
    StageCost::new(Mat::identity(nx, nx), Mat::identity(nu, nu) * 0.5, Vector::zeros(nx)).unwrap()
}

// ---------------------------------------------------------------------------
// Geometry oracles

/// Vertices of a bounded polytope by solving every `d`-subset of rows.
pub fn enumerate_vertices(p: &Polytope) -> Vec<Vector> {
    let (a, b) = (p.normals(), p.offsets());
    let (m, d) = (a.nrows(), p.dim());
    let mut out: Vec<Vector> = Vec::new();
    let mut idx: Vec<usize> = (0..d).collect();
    if m < d {
        return out;
    }
    loop {
        let sub = Mat::from_fn(d, d, |i, j| a[(idx[i], j)]);
        let rhs = Vector::from_fn(d, |i, _| b[idx[i]]);
        if sub.determinant().abs() > 1e-10 {
            if let Some(x) = sub.lu().solve(&rhs) {
                let inside = (a * &x - b).iter().all(|&v| v <= 1e-9);
                if inside && out.iter().all(|y| (y - &x).amax() > 1e-9) {
                    out.push(x);
                }
            }
        }
        // Next combination in lexicographic order.
        let mut i = d;
        while i > 0 && idx[i - 1] == m - d + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for j in i..d {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Rows touching at least `dim` vertices, i.e. facets of a simple polytope.
pub fn facet_rows(p: &Polytope, vertices: &[Vector]) -> Vec<usize> {
    (0..p.num_rows())
        .filter(|&i| {
            let a = p.normals().row(i).transpose();
            vertices.iter().filter(|v| (a.dot(v) - p.offsets()[i]).abs() <= 1e-7).count() >= p.dim()
        })
        .collect()
}

/// Convex hull of planar points (monotone chain) as halfspaces.
pub fn hull_2d(points: &[Vector]) -> Polytope {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 1e-12 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 1e-12 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    // Counter-clockwise boundary: outward normal of edge p→q is (dy, −dx).
    let rows = (0..lower.len()).map(|i| {
        let (p, q) = (lower[i], lower[(i + 1) % lower.len()]);
        let n = Vector::from_vec(vec![q.1 - p.1, p.0 - q.0]);
        let off = n[0] * p.0 + n[1] * p.1;
        (n, off)
    });
    Polytope::from_rows(2, rows.collect::<Vec<_>>())
}

/// Bounded random polytope of dimension `d`: random tangent planes of the
/// unit sphere inside a loose box.
pub fn random_polytope(rng: &mut ChaCha8Rng, d: usize) -> Polytope {
    let mut rows = Vec::new();
    for i in 0..d {
        for s in [1.0, -1.0] {
            let mut a = Vector::zeros(d);
            a[i] = s;
            rows.push((a, rng.random_range(1.2..2.0)));
        }
    }
    for _ in 0..rng.random_range(d + 1..3 * d + 4) {
        let a = rand_vec(rng, d, 1.0);
        if a.norm() < 0.1 {
            continue;
        }
        let a = a.normalize();
        rows.push((a, rng.random_range(0.6..1.4)));
    }
    Polytope::from_rows(d, rows)
}

/// Appends rows that every vertex satisfies with slack, in random positions.
pub fn with_redundant_rows(rng: &mut ChaCha8Rng, p: &Polytope, count: usize) -> Polytope {
    let verts = enumerate_vertices(p);
    let mut rows: Vec<(Vector, f64)> = p.rows().collect();
    for _ in 0..count {
        let a = rand_vec(rng, p.dim(), 1.0);
        let top = verts.iter().map(|v| a.dot(v)).fold(f64::NEG_INFINITY, f64::max);
        let pos = rng.random_range(0..=rows.len());
        rows.insert(pos, (a, top + rng.random_range(0.05..1.0)));
    }
    Polytope::from_rows(p.dim(), rows)
}

/// Counts of instances where `remove_redundancy` and `project_eliminate`
/// disagree with the vertex-enumeration oracles.
#[derive(Debug, Default)]
pub struct GeometryReport {
    pub instances: usize,
    pub redundancy_mismatches: usize,
    pub projection_mismatches: usize,
}

pub fn geometry_oracle_study(seed: u64, instances: usize) -> GeometryReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GeometryReport { instances, ..Default::default() };
    for i in 0..instances {
        let d = 1 + i % 3;
        let base = random_polytope(&mut rng, d);
        let noisy = with_redundant_rows(&mut rng, &base, 5);
        let verts = enumerate_vertices(&noisy);
        let reduced = noisy.remove_redundancy();
        let facets = facet_rows(&noisy, &verts);
        // Facets that coincide up to the duplicate tolerance count once.
        let mut distinct: Vec<usize> = Vec::new();
        for &f in &facets {
            let a = noisy.normals().row(f);
            if distinct.iter().all(|&g| (noisy.normals().row(g) - a).amax() > 1e-9) {
                distinct.push(f);
            }
        }
        let same_set = reduced.set_equals(&noisy, 1e-7);
        if reduced.num_rows() != distinct.len() || !same_set {
            report.redundancy_mismatches += 1;
        }

        let keep: Vec<usize> = match d {
            1 => vec![0],
            2 => vec![rng.random_range(0..2)],
            _ => {
                let drop = rng.random_range(0..3);
                (0..3).filter(|&k| k != drop).collect()
            }
        };
        let projected_pts: Vec<Vector> =
            verts.iter().map(|v| Vector::from_iterator(keep.len(), keep.iter().map(|&k| v[k]))).collect();
        let oracle = if keep.len() == 1 {
            let lo = projected_pts.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
            let hi = projected_pts.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
            interval(lo, hi)
        } else {
            hull_2d(&projected_pts)
        };
        if !noisy.project_eliminate(&keep).set_equals(&oracle, 1e-7) {
            report.projection_mismatches += 1;
        }
    }
    report
}

/// Standard normal CDF from the `libm` error function.
pub fn oracle_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Quantile by bisection on the oracle CDF.
pub fn oracle_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0f64, 10.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if oracle_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Largest `|normal_quantile(p) − oracle(p)|` on the grid `0.001, 0.0011, …, 0.999`.
pub fn quantile_grid_error() -> f64 {
    (10..=9990).map(|i| i as f64 * 1e-4).map(|p| (normal_quantile(p) - oracle_quantile(p)).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Receding-horizon oracles

/// Largest covariance deviation between the disturbance-feedback form
/// `K = L(I − B̄L)⁻¹` and stage-wise propagation of `u = v + L_t(x − μ)`.
pub fn conversion_study(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (nx, nu, nw) = (rng.random_range(1..4), rng.random_range(1..3), rng.random_range(1..3));
        let n = rng.random_range(1..5);
        let window: Vec<_> = (0..n).map(|_| rand_system(&mut rng, nx, nu, nw)).collect();
        let bm = build_block_matrices(&window);
        let mut l = Mat::zeros(n * nu, (n + 1) * nx);
        let gains: Vec<Mat> = (0..n).map(|_| rand_mat(&mut rng, nu, nx, 0.5)).collect();
        for (t, g) in gains.iter().enumerate() {
            l.view_mut((t * nu, t * nx), (nu, nx)).copy_from(g);
        }
        let k = gains_from_state_feedback(&l, &bm.b_bar);
        let sigma0 = rand_psd(&mut rng, nx, 0.7);
        let cov_y = &bm.a_bar * &sigma0 * bm.a_bar.transpose() + &bm.d_bar * bm.d_bar.transpose();
        let ny = bm.ny();
        let fx = Mat::identity(ny, ny) + &bm.b_bar * &k;
        let cov_x = &fx * &cov_y * fx.transpose();
        let cov_u = &k * &cov_y * k.transpose();

        let mut belief = GaussianBelief { mean: Vector::zeros(nx), cov: sigma0.clone() };
        for t in 0..=n {
            let block = cov_x.view((t * nx, t * nx), (nx, nx)).into_owned();
            worst = worst.max((&block - &belief.cov).amax());
            if t == n {
                break;
            }
            let pm = policy_moments(&belief, &Vector::zeros(nu), &gains[t]);
            let ublock = cov_u.view((t * nu, t * nu), (nu, nu)).into_owned();
            worst = worst.max((&ublock - &pm.cov).amax());
            belief = step_moments(&belief, &pm, &window[t]).unwrap();
        }
    }
    worst
}

/// Solves `min ½zᵀHz + fᵀz s.t. Gz ≤ h` by enumerating active sets; exact
/// for the handful of variables used here.
pub fn brute_force_qp(h_mat: &Mat, f: &Vector, g: &Mat, h: &Vector) -> Option<(f64, Vector)> {
    let (m, n) = (g.nrows(), g.ncols());
    let mut best: Option<(f64, Vector)> = None;
    let mut subset = Vec::new();
    fn recurse(start: usize, subset: &mut Vec<usize>, n: usize, m: usize, eval: &mut dyn FnMut(&[usize])) {
        eval(subset);
        if subset.len() == n {
            return;
        }
        for i in start..m {
            subset.push(i);
            recurse(i + 1, subset, n, m, eval);
            subset.pop();
        }
    }
    let mut eval = |act: &[usize]| {
        let k = act.len();
        let mut kkt = Mat::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h_mat);
        let mut rhs = Vector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-f));
        for (j, &i) in act.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = g[(i, c)];
                kkt[(c, n + j)] = g[(i, c)];
            }
            rhs[n + j] = h[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { return };
        let z = sol.rows(0, n).into_owned();
        let multipliers_ok = (0..k).all(|j| sol[n + j] >= -1e-10);
        let feasible = (g * &z - h).iter().all(|&v| v <= 1e-9);
        if multipliers_ok && feasible {
            let val = 0.5 * z.dot(&(h_mat * &z)) + f.dot(&z);
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, z));
            }
        }
    };
    recurse(0, &mut subset, n, m, &mut eval);
    best
}

#[derive(Debug, Default)]
pub struct ZeroNoiseReport {
    pub matched: usize,
    pub worst_relative_error: f64,
    /// Instances where feasibility verdicts of solver and oracle differ.
    pub disagreements: usize,
}

/// With no noise and a deterministic start the program is a deterministic
/// constrained MPC; compares its optimal cost with a QP over the stacked inputs.
pub fn zero_noise_study(seed: u64, instances: usize) -> ZeroNoiseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ZeroNoiseReport::default();
    let mut attempts = 0;
    while report.matched < instances && attempts < 20 * instances {
        attempts += 1;
        let nx = rng.random_range(1..3);
        let nu = 1;
        let n = rng.random_range(1..4);
        let window: Vec<_> = (0..n)
            .map(|_| {
                let s = rand_system(&mut rng, nx, nu, 1);
                SystemRealization::new(s.a, s.b, Mat::zeros(nx, 1), s.r).unwrap()
            })
            .collect();
        let (x_lim, u_lim) = (rng.random_range(0.8..2.0), rng.random_range(0.2..1.0));
        let spec = boxed_spec(nx, nu, x_lim, u_lim, 0.05, 0.05);
        let cost = quadratic_cost(nx, nu);
        let x0 = rand_vec(&mut rng, nx, 0.9 * x_lim);
        let terminal_box = rng.random_range(0.5..1.5) * x_lim;
        let terminal = TerminalIngredients {
            sigma_f: Mat::identity(nx, nx),
            gain: Mat::zeros(nu, nx),
            z_matrix: Mat::zeros(nu, nx),
            x_safe: spec.state_polytope(),
            u_safe: spec.control_polytope(),
            x_f_mu: Polytope::boxed(&vec![-terminal_box; nx], &vec![terminal_box; nx]),
            iteration_count: 0,
            converged: true,
        };
        let problem = SmpcProblem {
            window: &window,
            cost: &cost,
            spec: &spec,
            terminal: Some(&terminal),
            options: SmpcOptions::default(),
        };
        let belief = GaussianBelief::deterministic(x0.clone());

        // X = Āx0 + r̄ + B̄V; cost Σ_{t=0}^{N} |x_t|² + 0.5 Σ |u_t|².
        let bm = build_block_matrices(&window);
        let c0 = &bm.a_bar * &x0 + &bm.r_bar;
        let hq = 2.0 * (bm.b_bar.transpose() * &bm.b_bar + Mat::identity(n * nu, n * nu) * 0.5);
        let fq = 2.0 * bm.b_bar.transpose() * &c0;
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for t in 1..n {
            for i in 0..nx {
                for s in [1.0, -1.0] {
                    let a: Vec<f64> = (0..n * nu).map(|j| s * bm.b_bar[(t * nx + i, j)]).collect();
                    rows.push((a, x_lim - s * c0[t * nx + i]));
                }
            }
        }
        for j in 0..n * nu {
            for s in [1.0, -1.0] {
                let mut a = vec![0.0; n * nu];
                a[j] = s;
                rows.push((a, u_lim));
            }
        }
        for i in 0..nx {
            for s in [1.0, -1.0] {
                let a: Vec<f64> = (0..n * nu).map(|j| s * bm.b_bar[(n * nx + i, j)]).collect();
                rows.push((a, terminal_box - s * c0[n * nx + i]));
            }
        }
        let g = Mat::from_fn(rows.len(), n * nu, |i, j| rows[i].0[j]);
        let h = Vector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
        let oracle = brute_force_qp(&hq, &fq, &g, &h).map(|(v, _)| v + c0.norm_squared());

        match (solve_smpc(&belief, &problem, &SolveSettings::default()), oracle) {
            (SmpcOutcome::Optimal(sol), Some(expected)) => {
                let rel = (sol.cost - expected).abs() / expected.abs().max(1.0);
                report.worst_relative_error = report.worst_relative_error.max(rel);
                report.matched += 1;
            }
            (SmpcOutcome::Infeasible, None) => {}
            _ => report.disagreements += 1,
        }
    }
    report
}

/// Two-vertex hull with a shared input matrix, and its terminal ingredients.
pub fn random_terminal_instance(rng: &mut ChaCha8Rng) -> Option<(ParameterHull, ChanceSpec, TerminalIngredients)> {
    let nx = 2;
    let b = rand_mat(rng, nx, 1, 1.0);
    let d = Mat::identity(nx, nx) * rng.random_range(0.02..0.08);
    let base = Mat::identity(nx, nx) * 0.95 + rand_mat(rng, nx, nx, 0.15);
    let vertices = (0..2)
        .map(|_| SystemRealization::new(&base + rand_mat(rng, nx, nx, 0.05), b.clone(), d.clone(), rand_vec(rng, nx, 0.02)).unwrap())
        .collect();
    let hull = ParameterHull::new(vertices).ok()?;
    let spec = boxed_spec(nx, 1, 2.0, 1.0, 0.05, 0.1);
    let term = synthesize(&hull, &spec, &TerminalOptions::default(), &SolveSettings::default()).ok()?;
    Some((hull, spec, term))
}

pub fn sample_in_hull(rng: &mut ChaCha8Rng, hull: &ParameterHull) -> SystemRealization {
    let l: f64 = rng.random_range(0.0..1.0);
    let (v0, v1) = (&hull.vertices()[0], &hull.vertices()[1]);
    SystemRealization::new(
        &v0.a * l + &v1.a * (1.0 - l),
        &v0.b * l + &v1.b * (1.0 - l),
        &v0.d * l + &v1.d * (1.0 - l),
        &v0.r * l + &v1.r * (1.0 - l),
    )
    .unwrap()
}

#[derive(Debug, Default)]
pub struct ShiftReport {
    pub checked: usize,
    pub worst_violation: f64,
    /// Largest `resolved − candidate` cost; non-positive when the bound holds.
    pub worst_cost_excess: f64,
    /// Optimal solutions that missed the terminal conditions by more than 1e-6.
    pub terminal_misses: usize,
    /// Candidates without a terminal feedforward or with an infeasible re-solve.
    pub failures: usize,
}

/// Builds the shifted candidate after each solved instance and checks it
/// against the next program.
pub fn shift_study(seed: u64, instances: usize) -> ShiftReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = SolveSettings::default();
    let options = SmpcOptions { mode: GainMode::LowerTriangular, terminal_cost: true };
    let cost = quadratic_cost(2, 1);
    let mut report = ShiftReport { worst_cost_excess: f64::NEG_INFINITY, ..Default::default() };
    let mut attempts = 0;
    while report.checked < instances && attempts < 20 * instances {
        attempts += 1;
        let Some((hull, spec, term)) = random_terminal_instance(&mut rng) else { continue };
        for _ in 0..5 {
            if report.checked == instances {
                break;
            }
            let n = rng.random_range(1..5);
            let schedule: Vec<_> = (0..=n).map(|_| sample_in_hull(&mut rng, &hull)).collect();
            let belief = GaussianBelief { mean: rand_vec(&mut rng, 2, 1.0), cov: rand_psd(&mut rng, 2, 0.05) };
            let problem = SmpcProblem { window: &schedule[..n], cost: &cost, spec: &spec, terminal: Some(&term), options };
            let SmpcOutcome::Optimal(sol) = solve_smpc(&belief, &problem, &settings) else { continue };
            report.checked += 1;
            let cov_gap = min_eigenvalue(&(&term.sigma_f - &sol.predicted_covs[n]));
            if cov_gap < -1e-6 || term.x_f_mu.max_violation(&sol.predicted_means[n]) > 1e-6 {
                report.terminal_misses += 1;
            }
            let Ok(cand) = shift_candidate(&sol, &term, &schedule[1..]) else {
                report.failures += 1;
                continue;
            };
            let next = SmpcProblem { window: &schedule[1..], ..problem };
            let (program, layout) = build_program(&cand.belief, &next);
            let z = layout.point(&cand.v_stack, &cand.k);
            report.worst_violation = report.worst_violation.max(program.max_violation(&z));
            let SmpcOutcome::Optimal(resolved) = solve_smpc(&cand.belief, &next, &settings) else {
                report.failures += 1;
                continue;
            };
            report.worst_cost_excess = report.worst_cost_excess.max(resolved.cost - layout.cost_of(&z));
        }
    }
    report
}

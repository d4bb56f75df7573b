//! Offline terminal ingredients: terminal covariance bound and gain from a
//! vertex-LMI semidefinite program, tightened safe sets, and the robust
//! controlled invariant terminal mean set.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conic::{self, Affine, ProgramBuilder, SolveSettings, SolveStatus};
use crate::linalg::{condition_number, min_eigenvalue, row_major, symmetrize, Mat, Vector};
use crate::lp::{self, LpOutcome};
use crate::polytope::{pre_set, pre_set_per_vertex, Polytope};
use crate::sysmodel::{ChanceSpec, ParameterHull};

/// Lower bound `Σ̃ ⪰ RIDGE·I` keeping the SDP away from singular solutions.
const RIDGE: f64 = 1e-9;
const MAX_CONDITION: f64 = 1e12;
const CONTRACTION_ATTEMPTS: usize = 5;
/// Largest constraint slack accepted from the terminal feedforward LP.
const FEEDFORWARD_SLACK: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TerminalError {
    #[error("terminal covariance program is infeasible: no common stabilizing structure for this hull")]
    SdpInfeasible,
    #[error("terminal covariance program failed numerically ({0})")]
    SolverFailure(String),
    #[error("terminal covariance is numerically singular (condition number {0:e})")]
    GainRecovery(f64),
    #[error("tightened {0} set is empty")]
    SafeSetEmpty(&'static str),
    #[error("invariant-set iteration did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("invariant-set iteration became empty at iteration {0}")]
    NoInvariantSet(usize),
    #[error("converged set failed the invariance check after {0} contractions")]
    NotInvariant(usize),
    #[error("per-vertex feedforward requires every hull vertex to share its input matrix")]
    UnsharedInput,
}

/// Solution of the terminal covariance program.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCovariance {
    pub sigma_f: Mat,
    pub z_matrix: Mat,
    pub gain: Mat,
}

/// Minimizes `tr Σ̃` subject to, for every hull vertex,
/// `[[Σ̃ − DDᵀ, AΣ̃ + BZ], [·ᵀ, Σ̃]] ⪰ 0`, and recovers `L̃ = Z Σ̃⁻¹`.
pub fn solve_terminal_covariance(
    hull: &ParameterHull,
    settings: &SolveSettings,
) -> Result<TerminalCovariance, TerminalError> {
    let (nx, nu) = (hull.nx(), hull.nu());
    let mut builder = ProgramBuilder::new();
    let sig_vars = builder.add_vars(nx * (nx + 1) / 2);
    let z_vars = builder.add_vars(nu * nx);
    let n = builder.n_vars();
    // Σ̃ is stored as its lower triangle, column by column.
    let sig_index = |i: usize, j: usize| {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        sig_vars.start + c * nx - c * (c + 1) / 2 + r
    };
    let z_index = |i: usize, j: usize| z_vars.start + i * nx + j;
    for i in 0..nx {
        builder.set_cost(sig_index(i, i), 1.0);
    }

    // Σ̃ − ridge·I ⪰ 0.
    let mut ridge = Affine::zeros(nx * nx, n);
    for j in 0..nx {
        for i in 0..nx {
            ridge.coeffs[(i + j * nx, sig_index(i, j))] = 1.0;
        }
        ridge.constant[j + j * nx] = -RIDGE;
    }
    builder.push_psd(nx, &ridge);

    let d2 = 2 * nx;
    for v in hull.vertices() {
        let ddt = &v.d * v.d.transpose();
        let mut full = Affine::zeros(d2 * d2, n);
        let mut put = |r: usize, c: usize, var: usize, coef: f64| {
            full.coeffs[(r + c * d2, var)] += coef;
        };
        for i in 0..nx {
            for j in 0..nx {
                // Diagonal blocks: Σ̃.
                put(i, j, sig_index(i, j), 1.0);
                put(nx + i, nx + j, sig_index(i, j), 1.0);
                // Off-diagonal block (A Σ̃ + B Z) and its transpose.
                for k in 0..nx {
                    let a = v.a[(i, k)];
                    if a != 0.0 {
                        put(i, nx + j, sig_index(k, j), a);
                        put(nx + j, i, sig_index(k, j), a);
                    }
                }
                for k in 0..nu {
                    let b = v.b[(i, k)];
                    if b != 0.0 {
                        put(i, nx + j, z_index(k, j), b);
                        put(nx + j, i, z_index(k, j), b);
                    }
                }
            }
        }
        for i in 0..nx {
            for j in 0..nx {
                full.constant[i + j * d2] = -ddt[(i, j)];
            }
        }
        builder.push_psd(d2, &full);
    }

    let program = builder.build();
    let out = conic::solve(&program, settings);
    match out.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(TerminalError::SdpInfeasible),
        _ => return Err(TerminalError::SolverFailure(out.stats.backend_status)),
    }
    let x = out.primal.expect("optimal outcome carries a point");
    let sigma_f = symmetrize(&Mat::from_fn(nx, nx, |i, j| x[sig_index(i, j)]));
    let z_matrix = Mat::from_fn(nu, nx, |i, j| x[z_index(i, j)]);
    let cond = condition_number(&sigma_f);
    if !(cond <= MAX_CONDITION) {
        return Err(TerminalError::GainRecovery(cond));
    }
    let inv = sigma_f.clone().try_inverse().ok_or(TerminalError::GainRecovery(cond))?;
    let gain = &z_matrix * inv;
    Ok(TerminalCovariance { sigma_f, z_matrix, gain })
}

/// Smallest eigenvalue over vertices of `Σ_f − (A+BL̃)Σ_f(A+BL̃)ᵀ − DDᵀ`.
pub fn lyapunov_margin(hull: &ParameterHull, sigma_f: &Mat, gain: &Mat) -> f64 {
    hull.vertices()
        .iter()
        .map(|v| {
            let acl = &v.a + &v.b * gain;
            min_eigenvalue(&(sigma_f - &acl * sigma_f * acl.transpose() - &v.d * v.d.transpose()))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Tightened mean constraints guaranteeing the chance rows for every
/// covariance `Σ ⪯ Σ_f` under the terminal gain.
///
/// Rows keep their order: row `i` of each result corresponds to row `i` of `spec`.
pub fn tighten(spec: &ChanceSpec, sigma_f: &Mat, gain: &Mat) -> Result<(Polytope, Polytope), TerminalError> {
    let u_cov = gain * sigma_f * gain.transpose();
    let x_rows = spec
        .state_rows
        .iter()
        .map(|row| {
            let sd = row.normal.dot(&(sigma_f * &row.normal)).max(0.0).sqrt();
            (row.normal.clone(), row.offset - sd * row.quantile())
        })
        .collect::<Vec<_>>();
    let u_rows = spec
        .control_rows
        .iter()
        .map(|row| {
            let sd = row.normal.dot(&(&u_cov * &row.normal)).max(0.0).sqrt();
            (row.normal.clone(), row.offset - sd * row.quantile())
        })
        .collect::<Vec<_>>();
    let x_safe = Polytope::from_rows(spec.dim_x(), x_rows);
    let u_safe = Polytope::from_rows(spec.dim_u(), u_rows);
    if x_safe.is_empty() {
        return Err(TerminalError::SafeSetEmpty("state"));
    }
    if u_safe.is_empty() {
        return Err(TerminalError::SafeSetEmpty("control"));
    }
    Ok((x_safe, u_safe))
}

/// Outcome of the invariant-set iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantSet {
    pub set: Polytope,
    pub iterations: usize,
    /// Number of `(1 − eps)` offset contractions needed to certify invariance.
    pub contractions: usize,
    pub converged: bool,
}

/// How the terminal feedforward may depend on the hull vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// Per-vertex when every vertex shares its input matrix, common otherwise.
    #[default]
    Auto,
    /// One feedforward serves every vertex.
    Common,
    /// Each vertex has its own feedforward. Only sound when all vertices share
    /// `B`: the feedforward for a realization inside the hull is then the
    /// convex combination of the vertex feedforwards.
    PerVertex,
}

impl Coupling {
    /// Resolves `Auto` for `hull`.
    pub fn resolve(self, hull: &ParameterHull) -> Result<Coupling, TerminalError> {
        let shared = hull.vertices().windows(2).all(|w| w[0].b == w[1].b);
        match self {
            Coupling::Auto if shared => Ok(Coupling::PerVertex),
            Coupling::Auto => Ok(Coupling::Common),
            Coupling::PerVertex if !shared => Err(TerminalError::UnsharedInput),
            c => Ok(c),
        }
    }
}

fn pre_image(target: &Polytope, hull: &ParameterHull, controls: &Polytope, coupling: Coupling) -> Polytope {
    match coupling {
        Coupling::PerVertex => pre_set_per_vertex(target, hull, controls),
        _ => pre_set(target, hull, controls),
    }
}

/// Iterates `Ω ← Ω ∩ pre(Ω)` from `x_safe` until successive iterates agree up
/// to `eps`, then certifies invariance of the result.
pub fn robust_invariant_set(
    x_safe: &Polytope,
    u_safe: &Polytope,
    hull: &ParameterHull,
    max_iter: usize,
    eps: f64,
) -> Result<InvariantSet, TerminalError> {
    robust_invariant_set_with(x_safe, u_safe, hull, max_iter, eps, Coupling::Auto)
}

pub fn robust_invariant_set_with(
    x_safe: &Polytope,
    u_safe: &Polytope,
    hull: &ParameterHull,
    max_iter: usize,
    eps: f64,
    coupling: Coupling,
) -> Result<InvariantSet, TerminalError> {
    let coupling = coupling.resolve(hull)?;
    let mut omega = x_safe.remove_redundancy();
    if omega.is_flagged_empty() {
        return Err(TerminalError::NoInvariantSet(0));
    }
    for iteration in 1..=max_iter {
        let next = omega.intersect(&pre_image(&omega, hull, u_safe, coupling));
        if next.is_flagged_empty() || next.is_empty() {
            return Err(TerminalError::NoInvariantSet(iteration));
        }
        if omega.is_subset(&next.inflate(eps)) {
            let (set, contractions) = certify(next, u_safe, hull, eps, coupling)?;
            return Ok(InvariantSet { set, iterations: iteration, contractions, converged: true });
        }
        omega = next;
    }
    Err(TerminalError::NotConverged(max_iter))
}

/// Certifies `candidate`, shrinking its offsets by `(1 − eps)` up to
/// [`CONTRACTION_ATTEMPTS`] times.
fn certify(
    mut candidate: Polytope,
    u_safe: &Polytope,
    hull: &ParameterHull,
    eps: f64,
    coupling: Coupling,
) -> Result<(Polytope, usize), TerminalError> {
    for contractions in 0..=CONTRACTION_ATTEMPTS {
        if verify_invariance_with(&candidate, u_safe, hull, coupling)? {
            return Ok((candidate, contractions));
        }
        candidate = candidate.scale_offsets(1.0 - eps);
    }
    Err(TerminalError::NotInvariant(CONTRACTION_ATTEMPTS))
}

/// True iff `candidate ⊆ pre(candidate)`, with the feedforward coupling
/// resolved automatically.
pub fn verify_invariance(candidate: &Polytope, u_safe: &Polytope, hull: &ParameterHull) -> bool {
    verify_invariance_with(candidate, u_safe, hull, Coupling::Auto).unwrap_or(false)
}

pub fn verify_invariance_with(
    candidate: &Polytope,
    u_safe: &Polytope,
    hull: &ParameterHull,
    coupling: Coupling,
) -> Result<bool, TerminalError> {
    let coupling = coupling.resolve(hull)?;
    Ok(candidate.is_subset(&pre_image(candidate, hull, u_safe, coupling)))
}

/// Feedforward keeping every vertex successor of `mu` inside `target`.
///
/// Solves `min s` over `(v, s)` with `A^ℓμ + B^ℓv + r^ℓ` satisfying every
/// target row up to slack `s` and `v ∈ controls` up to `s`; returns `v` when
/// the optimal slack is at most `1e-6`.
pub fn terminal_feedforward(
    target: &Polytope,
    controls: &Polytope,
    hull: &ParameterHull,
    mu: &Vector,
) -> Option<Vector> {
    let nu = hull.nu();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for v in hull.vertices() {
        let drift = &v.a * mu + &v.r;
        for (g, h) in target.rows() {
            let gb = v.b.transpose() * &g;
            let mut row: Vec<f64> = gb.iter().copied().collect();
            row.push(-1.0);
            rows.push((row, h - g.dot(&drift)));
        }
    }
    for (g, h) in controls.rows() {
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
        LpOutcome::Optimal { point, .. } if point[nu] <= FEEDFORWARD_SLACK => Some(point.rows(0, nu).into_owned()),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminalOptions {
    pub max_iter: usize,
    pub eps: f64,
    pub coupling: Coupling,
}

impl Default for TerminalOptions {
    fn default() -> Self {
        Self { max_iter: 100, eps: 1e-6, coupling: Coupling::Auto }
    }
}

/// Everything the online controller needs for recursive feasibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalIngredients {
    #[serde(with = "row_major")]
    pub sigma_f: Mat,
    #[serde(with = "row_major")]
    pub gain: Mat,
    #[serde(with = "row_major")]
    pub z_matrix: Mat,
    pub x_safe: Polytope,
    pub u_safe: Polytope,
    pub x_f_mu: Polytope,
    pub iteration_count: usize,
    pub converged: bool,
}

/// Runs the full offline pipeline.
pub fn synthesize(
    hull: &ParameterHull,
    spec: &ChanceSpec,
    options: &TerminalOptions,
    settings: &SolveSettings,
) -> Result<TerminalIngredients, TerminalError> {
    let cov = solve_terminal_covariance(hull, settings)?;
    let (x_safe, u_safe) = tighten(spec, &cov.sigma_f, &cov.gain)?;
    let inv = robust_invariant_set_with(&x_safe, &u_safe, hull, options.max_iter, options.eps, options.coupling)?;
    Ok(TerminalIngredients {
        sigma_f: cov.sigma_f,
        gain: cov.gain,
        z_matrix: cov.z_matrix,
        x_safe,
        u_safe,
        x_f_mu: inv.set,
        iteration_count: inv.iterations,
        converged: true,
    })
}

/// Content hash of the synthesis inputs, used as an on-disk cache key.
pub fn cache_key(hull: &ParameterHull, spec: &ChanceSpec, options: &TerminalOptions) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        hull: &'a ParameterHull,
        spec: &'a ChanceSpec,
        options: &'a TerminalOptions,
        ridge: f64,
    }
    let doc = serde_json::to_vec(&Key { hull, spec, options, ridge: RIDGE }).expect("inputs serialize");
    hex::encode(Sha256::digest(&doc))
}

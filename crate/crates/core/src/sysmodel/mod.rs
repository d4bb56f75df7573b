//! LTV system description, polytopic parameter hull and Gaussian belief
//! arithmetic.

mod quantile;

pub use quantile::{normal_cdf, normal_pdf, normal_quantile};

use nalgebra::Cholesky;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{clamp_psd, min_eigenvalue, plain_vec, row_major, symmetrize, Mat, Vector};
use crate::lp::{self, LpOutcome};
use crate::polytope::Polytope;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_CLAMP_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter hull must have at least one vertex")]
    EmptyHull,
    #[error("covariance is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("control weight R must be positive definite")]
    ControlWeightNotPd,
    #[error("violation probability {0} must lie in (0, 0.5]")]
    Probability(f64),
}

/// One realization `x⁺ = A x + B u + D w + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRealization {
    #[serde(with = "row_major")]
    pub a: Mat,
    #[serde(with = "row_major")]
    pub b: Mat,
    #[serde(with = "row_major")]
    pub d: Mat,
    #[serde(with = "plain_vec")]
    pub r: Vector,
}

impl SystemRealization {
    pub fn new(a: Mat, b: Mat, d: Mat, r: Vector) -> Result<Self, ModelError> {
        let nx = a.nrows();
        if a.ncols() != nx || b.nrows() != nx || d.nrows() != nx || r.len() != nx {
            return Err(ModelError::Shape(format!(
                "A {:?}, B {:?}, D {:?}, r {}",
                a.shape(),
                b.shape(),
                d.shape(),
                r.len()
            )));
        }
        Ok(Self { a, b, d, r })
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn nw(&self) -> usize {
        self.d.ncols()
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.a.shape() == other.a.shape()
            && self.b.shape() == other.b.shape()
            && self.d.shape() == other.d.shape()
    }

    /// Stacks `[A B D r]` entries into one flat vector (row-major per block).
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in [&self.a, &self.b, &self.d] {
            for i in 0..m.nrows() {
                out.extend(m.row(i).iter());
            }
        }
        out.extend(self.r.iter());
        out
    }
}

/// Convex hull `co{S¹, …, S^Np}` of system realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterHull {
    vertices: Vec<SystemRealization>,
}

impl ParameterHull {
    pub fn new(vertices: Vec<SystemRealization>) -> Result<Self, ModelError> {
        let first = vertices.first().ok_or(ModelError::EmptyHull)?;
        if let Some(bad) = vertices.iter().position(|v| !v.same_shape(first)) {
            return Err(ModelError::Shape(format!("hull vertex {bad} differs in shape from vertex 0")));
        }
        Ok(Self { vertices })
    }

    pub fn single(sys: SystemRealization) -> Self {
        Self { vertices: vec![sys] }
    }

    pub fn vertices(&self) -> &[SystemRealization] {
        &self.vertices
    }

    pub fn nx(&self) -> usize {
        self.vertices[0].nx()
    }

    pub fn nu(&self) -> usize {
        self.vertices[0].nu()
    }

    pub fn nw(&self) -> usize {
        self.vertices[0].nw()
    }

    /// Convex weights expressing `sys` as a combination of the vertices, if any.
    ///
    /// Diagnostic only; the online controller assumes membership.
    pub fn membership(&self, sys: &SystemRealization, tol: f64) -> Option<Vec<f64>> {
        if !sys.same_shape(&self.vertices[0]) {
            return None;
        }
        let np = self.vertices.len();
        let target = sys.flatten();
        let columns: Vec<Vec<f64>> = self.vertices.iter().map(|v| v.flatten()).collect();
        // Rows: ±(Σ λ_ℓ S^ℓ − S) ≤ tol, ±(Σ λ_ℓ − 1) ≤ tol, −λ ≤ 0.
        let m = 2 * (target.len() + 1) + np;
        let mut a = Mat::zeros(m, np);
        let mut b = vec![0.0; m];
        let mut row = 0;
        for (e, &t) in target.iter().enumerate() {
            for l in 0..np {
                a[(row, l)] = columns[l][e];
                a[(row + 1, l)] = -columns[l][e];
            }
            b[row] = t + tol;
            b[row + 1] = -t + tol;
            row += 2;
        }
        for l in 0..np {
            a[(row, l)] = 1.0;
            a[(row + 1, l)] = -1.0;
        }
        b[row] = 1.0 + tol;
        b[row + 1] = -1.0 + tol;
        row += 2;
        for l in 0..np {
            a[(row + l, l)] = -1.0;
        }
        match lp::maximize(&vec![0.0; np], &a, &b) {
            LpOutcome::Optimal { point, .. } => Some(point.iter().copied().collect()),
            _ => None,
        }
    }
}

/// Gaussian belief `N(μ, Σ)` over the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    #[serde(with = "plain_vec")]
    pub mean: Vector,
    #[serde(with = "row_major")]
    pub cov: Mat,
}

impl GaussianBelief {
    /// Validates symmetry and clamps eigenvalues in `[-1e-8, 0)` to zero.
    pub fn new(mean: Vector, cov: Mat) -> Result<Self, ModelError> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(ModelError::Shape(format!("mean {n}, covariance {:?}", cov.shape())));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > SYMMETRY_TOL * (1.0 + cov.amax()) {
            return Err(ModelError::NotSymmetric(asym));
        }
        let cov = symmetrize(&cov);
        let lo = min_eigenvalue(&cov);
        if lo < -PSD_CLAMP_TOL {
            return Err(ModelError::NotPsd(lo));
        }
        let cov = if lo < 0.0 { clamp_psd(&cov) } else { cov };
        Ok(Self { mean, cov })
    }

    /// Point mass at `x`.
    pub fn deterministic(x: Vector) -> Self {
        let n = x.len();
        Self { mean: x, cov: Mat::zeros(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Quadratic tracking cost `(x − x_g)ᵀQ(x − x_g) + uᵀRu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    #[serde(with = "row_major")]
    pub q: Mat,
    #[serde(with = "row_major")]
    pub r: Mat,
    #[serde(with = "plain_vec")]
    pub goal: Vector,
}

impl StageCost {
    pub fn new(q: Mat, r: Mat, goal: Vector) -> Result<Self, ModelError> {
        if q.nrows() != q.ncols() || r.nrows() != r.ncols() || goal.len() != q.nrows() {
            return Err(ModelError::Shape(format!(
                "Q {:?}, R {:?}, goal {}",
                q.shape(),
                r.shape(),
                goal.len()
            )));
        }
        let lo = min_eigenvalue(&q);
        if lo < -PSD_CLAMP_TOL {
            return Err(ModelError::NotPsd(lo));
        }
        if Cholesky::new(symmetrize(&r)).is_none() {
            return Err(ModelError::ControlWeightNotPd);
        }
        Ok(Self { q: symmetrize(&q), r: symmetrize(&r), goal })
    }
}

/// One chance-constrained row `Pr(aᵀz ≤ b) ≥ 1 − p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceRow {
    #[serde(with = "plain_vec")]
    pub normal: Vector,
    pub offset: f64,
    pub prob: f64,
}

impl ChanceRow {
    pub fn new(normal: Vector, offset: f64, prob: f64) -> Result<Self, ModelError> {
        if !(prob > 0.0 && prob <= 0.5) {
            return Err(ModelError::Probability(prob));
        }
        Ok(Self { normal, offset, prob })
    }

    /// `Φ⁻¹(1 − p)`, nonnegative by the row invariant.
    pub fn quantile(&self) -> f64 {
        normal_quantile(1.0 - self.prob)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceSpec {
    pub state_rows: Vec<ChanceRow>,
    pub control_rows: Vec<ChanceRow>,
}

impl ChanceSpec {
    /// Builds a spec from nominal polytopes, one probability per row.
    pub fn from_polytopes(
        state: &Polytope,
        state_probs: &[f64],
        control: &Polytope,
        control_probs: &[f64],
    ) -> Result<Self, ModelError> {
        let rows = |p: &Polytope, probs: &[f64]| -> Result<Vec<ChanceRow>, ModelError> {
            if probs.len() != p.num_rows() {
                return Err(ModelError::Shape(format!(
                    "{} probabilities for {} rows",
                    probs.len(),
                    p.num_rows()
                )));
            }
            p.rows().zip(probs).map(|((a, b), &pr)| ChanceRow::new(a.clone_owned(), b, pr)).collect()
        };
        Ok(Self { state_rows: rows(state, state_probs)?, control_rows: rows(control, control_probs)? })
    }

    pub fn state_polytope(&self) -> Polytope {
        Polytope::from_rows(self.dim_x(), self.state_rows.iter().map(|r| (r.normal.clone(), r.offset)))
    }

    pub fn control_polytope(&self) -> Polytope {
        Polytope::from_rows(self.dim_u(), self.control_rows.iter().map(|r| (r.normal.clone(), r.offset)))
    }

    pub fn dim_x(&self) -> usize {
        self.state_rows.first().map_or(0, |r| r.normal.len())
    }

    pub fn dim_u(&self) -> usize {
        self.control_rows.first().map_or(0, |r| r.normal.len())
    }
}

/// First and second moments of `u = v + L(x − μ)` under `x ~ N(μ, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMoments {
    pub mean: Vector,
    pub cross: Mat,
    pub cov: Mat,
}

pub fn policy_moments(belief: &GaussianBelief, v: &Vector, gain: &Mat) -> PolicyMoments {
    assert_eq!(gain.ncols(), belief.dim(), "gain columns must match state dimension");
    assert_eq!(gain.nrows(), v.len(), "gain rows must match control dimension");
    let cross = &belief.cov * gain.transpose();
    let cov = symmetrize(&(gain * &cross));
    PolicyMoments { mean: v.clone(), cross, cov }
}

/// One-step moment propagation of the closed loop.
pub fn step_moments(
    belief: &GaussianBelief,
    policy: &PolicyMoments,
    sys: &SystemRealization,
) -> Result<GaussianBelief, ModelError> {
    let (a, b) = (&sys.a, &sys.b);
    let mean = a * &belief.mean + b * &policy.mean + &sys.r;
    let a_sxu_bt = a * &policy.cross * b.transpose();
    let cov = a * &belief.cov * a.transpose()
        + &a_sxu_bt
        + a_sxu_bt.transpose()
        + b * &policy.cov * b.transpose()
        + &sys.d * sys.d.transpose();
    GaussianBelief::new(mean, symmetrize(&cov))
}

/// Draws `A x + B u + D w + r` with `w ~ N(0, I)`.
pub fn sample_step<R: Rng + ?Sized>(x: &Vector, u: &Vector, sys: &SystemRealization, rng: &mut R) -> Vector {
    let w = sample_noise(sys.nw(), rng);
    propagate(x, u, &w, sys)
}

pub fn sample_noise<R: Rng + ?Sized>(nw: usize, rng: &mut R) -> Vector {
    Vector::from_iterator(nw, (0..nw).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Deterministic transition for a given disturbance.
pub fn propagate(x: &Vector, u: &Vector, w: &Vector, sys: &SystemRealization) -> Vector {
    &sys.a * x + &sys.b * u + &sys.d * w + &sys.r
}

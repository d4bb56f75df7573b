//! Solver-neutral conic programs and the Clarabel adapter.
//!
//! A program minimizes `cᵀx` subject to a list of blocks `F x + g ∈ K`, where
//! `K` is the zero cone, the nonnegative orthant, a second-order cone
//! `{(t, y) : ‖y‖ ≤ t}` or the PSD cone in scaled-triangle form. Quadratic
//! costs are modeled by the caller through epigraph variables.

use std::fmt::Write as _;
use std::ops::Range;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cone {
    Zero(usize),
    Nonnegative(usize),
    /// `(t, y)` with `‖y‖ ≤ t`; the size counts `t`.
    SecondOrder(usize),
    /// PSD matrices of the given order, stored as `d(d+1)/2` scaled-triangle rows.
    Psd(usize),
}

impl Cone {
    pub fn rows(&self) -> usize {
        match *self {
            Cone::Zero(m) | Cone::Nonnegative(m) | Cone::SecondOrder(m) => m,
            Cone::Psd(d) => d * (d + 1) / 2,
        }
    }

    fn keyword(&self) -> &'static str {
        match self {
            Cone::Zero(_) => "zero",
            Cone::Nonnegative(_) => "nonneg",
            Cone::SecondOrder(_) => "soc",
            Cone::Psd(_) => "psd",
        }
    }

    fn size(&self) -> usize {
        match *self {
            Cone::Zero(m) | Cone::Nonnegative(m) | Cone::SecondOrder(m) | Cone::Psd(m) => m,
        }
    }
}

/// Affine expression `coeffs · x + constant` with one row per output entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub coeffs: Mat,
    pub constant: Vector,
}

impl Affine {
    pub fn zeros(rows: usize, n_vars: usize) -> Self {
        Self { coeffs: Mat::zeros(rows, n_vars), constant: Vector::zeros(rows) }
    }

    pub fn constant(c: Vector, n_vars: usize) -> Self {
        Self { coeffs: Mat::zeros(c.len(), n_vars), constant: c }
    }

    /// Selects variables `range` as an expression.
    pub fn vars(range: Range<usize>, n_vars: usize) -> Self {
        let mut out = Self::zeros(range.len(), n_vars);
        for (row, v) in range.enumerate() {
            out.coeffs[(row, v)] = 1.0;
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.constant.len()
    }

    pub fn n_vars(&self) -> usize {
        self.coeffs.ncols()
    }

    /// `M · self`.
    pub fn left_mul(&self, m: &Mat) -> Self {
        Self { coeffs: m * &self.coeffs, constant: m * &self.constant }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self { coeffs: &self.coeffs + &other.coeffs, constant: &self.constant + &other.constant }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { coeffs: &self.coeffs * s, constant: &self.constant * s }
    }

    pub fn stack(parts: &[Self]) -> Self {
        let n = parts.first().map_or(0, |p| p.n_vars());
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut out = Self::zeros(rows, n);
        let mut r = 0;
        for p in parts {
            assert_eq!(p.n_vars(), n, "stacked expressions must share the variable count");
            out.coeffs.view_mut((r, 0), (p.rows(), n)).copy_from(&p.coeffs);
            out.constant.rows_mut(r, p.rows()).copy_from(&p.constant);
            r += p.rows();
        }
        out
    }

    pub fn row(&self, i: usize) -> Self {
        Self {
            coeffs: self.coeffs.rows(i, 1).into_owned(),
            constant: Vector::from_element(1, self.constant[i]),
        }
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        &self.coeffs * x + &self.constant
    }

    /// True when every coefficient and the constant are exactly zero.
    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&v| v == 0.0) && self.constant.iter().all(|&v| v == 0.0)
    }

    fn padded(&self, n_vars: usize) -> Self {
        assert!(self.n_vars() <= n_vars);
        let mut coeffs = Mat::zeros(self.rows(), n_vars);
        coeffs.view_mut((0, 0), (self.rows(), self.n_vars())).copy_from(&self.coeffs);
        Self { coeffs, constant: self.constant.clone() }
    }
}

/// Scaled upper-triangle vectorization (column-major, off-diagonals times √2).
pub fn svec(m: &Mat) -> Vector {
    let d = m.nrows();
    let mut out = Vector::zeros(d * (d + 1) / 2);
    let mut k = 0;
    for j in 0..d {
        for i in 0..=j {
            out[k] = if i == j { m[(i, i)] } else { std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]) };
            k += 1;
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat(v: &Vector, d: usize) -> Mat {
    assert_eq!(v.len(), d * (d + 1) / 2);
    let mut m = Mat::zeros(d, d);
    let mut k = 0;
    for j in 0..d {
        for i in 0..=j {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                m[(i, j)] = v[k] / std::f64::consts::SQRT_2;
                m[(j, i)] = m[(i, j)];
            }
            k += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeBlock {
    pub cone: Cone,
    pub expr: Affine,
}

/// Immutable conic program; build it with [`ProgramBuilder`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    n_vars: usize,
    objective: Vector,
    blocks: Vec<ConeBlock>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unexpected end of input")]
    Truncated,
}

impl ConicProgram {
    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn objective(&self) -> &Vector {
        &self.objective
    }

    pub fn blocks(&self) -> &[ConeBlock] {
        &self.blocks
    }

    pub fn n_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.cone.rows()).sum()
    }

    pub fn objective_value(&self, x: &Vector) -> f64 {
        self.objective.dot(x)
    }

    /// Largest cone violation of `x` over all blocks (0 when feasible).
    pub fn max_violation(&self, x: &Vector) -> f64 {
        self.blocks.iter().map(|b| cone_violation(b.cone, &b.expr.eval(x))).fold(0.0, f64::max)
    }

    /// Deterministic text dump; [`ConicProgram::parse`] restores it bit for bit.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "conic-program 1").unwrap();
        writeln!(s, "vars {}", self.n_vars).unwrap();
        let nz: Vec<usize> = (0..self.n_vars).filter(|&i| self.objective[i].to_bits() != 0).collect();
        writeln!(s, "objective {}", nz.len()).unwrap();
        for i in nz {
            writeln!(s, "{i} {:?}", self.objective[i]).unwrap();
        }
        for (k, b) in self.blocks.iter().enumerate() {
            let mut entries = Vec::new();
            for r in 0..b.expr.rows() {
                if b.expr.constant[r].to_bits() != 0 {
                    entries.push(format!("{r} - {:?}", b.expr.constant[r]));
                }
                for c in 0..self.n_vars {
                    let v = b.expr.coeffs[(r, c)];
                    if v.to_bits() != 0 {
                        entries.push(format!("{r} {c} {v:?}"));
                    }
                }
            }
            writeln!(s, "block {k} {} {} {}", b.cone.keyword(), b.cone.size(), entries.len()).unwrap();
            for e in entries {
                writeln!(s, "{e}").unwrap();
            }
        }
        writeln!(s, "end").unwrap();
        s
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = || lines.next().ok_or(ParseError::Truncated);
        let err = |line: usize, msg: &str| ParseError::Syntax { line, msg: msg.to_string() };

        let (ln, header) = next()?;
        if header != "conic-program 1" {
            return Err(err(ln, "bad header"));
        }
        let (ln, vars) = next()?;
        let n_vars: usize = vars
            .strip_prefix("vars ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(ln, "expected `vars <n>`"))?;
        let (ln, obj) = next()?;
        let count: usize = obj
            .strip_prefix("objective ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(ln, "expected `objective <count>`"))?;
        let mut objective = Vector::zeros(n_vars);
        for _ in 0..count {
            let (ln, l) = next()?;
            let mut it = l.split_whitespace();
            let idx: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err(ln, "bad index"))?;
            let val: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err(ln, "bad value"))?;
            if idx >= n_vars {
                return Err(err(ln, "variable index out of range"));
            }
            objective[idx] = val;
        }

        let mut blocks = Vec::new();
        loop {
            let (ln, l) = next()?;
            if l == "end" {
                break;
            }
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 5 || parts[0] != "block" {
                return Err(err(ln, "expected `block <k> <kind> <size> <entries>`"));
            }
            let size: usize = parts[3].parse().map_err(|_| err(ln, "bad cone size"))?;
            let cone = match parts[2] {
                "zero" => Cone::Zero(size),
                "nonneg" => Cone::Nonnegative(size),
                "soc" => Cone::SecondOrder(size),
                "psd" => Cone::Psd(size),
                _ => return Err(err(ln, "unknown cone kind")),
            };
            let entries: usize = parts[4].parse().map_err(|_| err(ln, "bad entry count"))?;
            let mut expr = Affine::zeros(cone.rows(), n_vars);
            for _ in 0..entries {
                let (ln, l) = next()?;
                let f: Vec<&str> = l.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(err(ln, "expected `<row> <col|-> <value>`"));
                }
                let r: usize = f[0].parse().map_err(|_| err(ln, "bad row"))?;
                let v: f64 = f[2].parse().map_err(|_| err(ln, "bad value"))?;
                if r >= cone.rows() {
                    return Err(err(ln, "row out of range"));
                }
                if f[1] == "-" {
                    expr.constant[r] = v;
                } else {
                    let c: usize = f[1].parse().map_err(|_| err(ln, "bad column"))?;
                    if c >= n_vars {
                        return Err(err(ln, "variable index out of range"));
                    }
                    expr.coeffs[(r, c)] = v;
                }
            }
            blocks.push(ConeBlock { cone, expr });
        }
        Ok(Self { n_vars, objective, blocks })
    }
}

fn cone_violation(cone: Cone, s: &Vector) -> f64 {
    match cone {
        Cone::Zero(_) => s.amax(),
        Cone::Nonnegative(_) => s.iter().map(|&v| -v).fold(0.0, f64::max),
        Cone::SecondOrder(_) => (s.rows(1, s.len() - 1).norm() - s[0]).max(0.0),
        Cone::Psd(d) => {
            if d == 0 {
                return 0.0;
            }
            let lo = SymmetricEigen::new(smat(s, d)).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            (-lo).max(0.0)
        }
    }
}

/// Accumulates variables, objective and cone blocks.
#[derive(Debug, Default)]
pub struct ProgramBuilder {
    n_vars: usize,
    objective: Vec<f64>,
    blocks: Vec<ConeBlock>,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vars(&mut self, count: usize) -> Range<usize> {
        let start = self.n_vars;
        self.n_vars += count;
        self.objective.resize(self.n_vars, 0.0);
        start..self.n_vars
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn set_cost(&mut self, var: usize, coefficient: f64) {
        self.objective[var] = coefficient;
    }

    /// Adds `expr ∈ cone`. Expressions may predate later variables.
    pub fn push(&mut self, cone: Cone, expr: Affine) {
        assert_eq!(cone.rows(), expr.rows(), "cone {cone:?} needs {} rows", cone.rows());
        assert!(!matches!(cone, Cone::SecondOrder(0)), "second-order cone needs a head entry");
        self.blocks.push(ConeBlock { cone, expr });
    }

    /// Adds `M ⪰ 0` where `full` holds the column-major entries of the
    /// symmetric `d × d` expression `M`.
    pub fn push_psd(&mut self, d: usize, full: &Affine) {
        assert_eq!(full.rows(), d * d);
        let mut tri = Affine::zeros(d * (d + 1) / 2, full.n_vars());
        let mut k = 0;
        for j in 0..d {
            for i in 0..=j {
                if i == j {
                    tri.coeffs.row_mut(k).copy_from(&full.coeffs.row(i + j * d));
                    tri.constant[k] = full.constant[i + j * d];
                } else {
                    let w = std::f64::consts::SQRT_2 * 0.5;
                    let row = (full.coeffs.row(i + j * d) + full.coeffs.row(j + i * d)) * w;
                    tri.coeffs.row_mut(k).copy_from(&row);
                    tri.constant[k] = (full.constant[i + j * d] + full.constant[j + i * d]) * w;
                }
                k += 1;
            }
        }
        self.push(Cone::Psd(d), tri);
    }

    pub fn build(self) -> ConicProgram {
        let n = self.n_vars;
        let blocks = self
            .blocks
            .into_iter()
            .map(|b| ConeBlock { cone: b.cone, expr: b.expr.padded(n) })
            .collect();
        ConicProgram { n_vars: n, objective: Vector::from_vec(self.objective), blocks }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSettings {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iter: u32,
    /// Residual accepted when the backend reports reduced accuracy.
    pub accept_tol: f64,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self { feas_tol: 1e-8, gap_tol: 1e-8, max_iter: 200, accept_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub solve_time: f64,
    /// Status string reported by the backend.
    pub backend_status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    /// Present iff `status == Optimal`.
    pub primal: Option<Vector>,
    pub objective: Option<f64>,
    pub stats: SolveStats,
}

pub trait ConicSolver {
    fn solve(&self, program: &ConicProgram, settings: &SolveSettings) -> SolveOutcome;
}

/// Interior-point backend provided by the `clarabel` crate.
#[derive(Debug, Clone, Copy, Default)]
pub struct Clarabel;

impl ConicSolver for Clarabel {
    fn solve(&self, program: &ConicProgram, settings: &SolveSettings) -> SolveOutcome {
        let n = program.n_vars;
        let m = program.n_rows();
        // Clarabel uses A x + s = b with s ∈ K; our blocks read F x + g ∈ K.
        let (mut ri, mut ci, mut vals) = (Vec::new(), Vec::new(), Vec::new());
        let mut b = Vec::with_capacity(m);
        let mut cones = Vec::with_capacity(program.blocks.len());
        let mut offset = 0;
        for blk in &program.blocks {
            for r in 0..blk.expr.rows() {
                for c in 0..n {
                    let v = blk.expr.coeffs[(r, c)];
                    if v != 0.0 {
                        ri.push(offset + r);
                        ci.push(c);
                        vals.push(-v);
                    }
                }
                b.push(blk.expr.constant[r]);
            }
            offset += blk.expr.rows();
            cones.push(match blk.cone {
                Cone::Zero(k) => SupportedConeT::ZeroConeT(k),
                Cone::Nonnegative(k) => SupportedConeT::NonnegativeConeT(k),
                Cone::SecondOrder(k) => SupportedConeT::SecondOrderConeT(k),
                Cone::Psd(d) => SupportedConeT::PSDTriangleConeT(d),
            });
        }
        let a = CscMatrix::new_from_triplets(m, n, ri, ci, vals);
        let p = CscMatrix::<f64>::zeros((n, n));
        let q: Vec<f64> = program.objective.iter().copied().collect();

        let failure = |backend: String| SolveOutcome {
            status: SolveStatus::NumericalFailure,
            primal: None,
            objective: None,
            stats: SolveStats { backend_status: backend, ..Default::default() },
        };
        let Ok(cfg) = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_feas(settings.feas_tol)
            .tol_gap_abs(settings.gap_tol)
            .tol_gap_rel(settings.gap_tol)
            .max_iter(settings.max_iter)
            .build()
        else {
            return failure("invalid settings".into());
        };
        let mut solver = match DefaultSolver::new(&p, &q, &a, &b, &cones, cfg) {
            Ok(s) => s,
            Err(e) => return failure(format!("setup: {e:?}")),
        };
        solver.solve();
        let sol = &solver.solution;
        let stats = SolveStats {
            iterations: sol.iterations,
            primal_residual: sol.r_prim,
            dual_residual: sol.r_dual,
            solve_time: sol.solve_time,
            backend_status: format!("{:?}", sol.status),
        };
        let x = Vector::from_vec(sol.x.clone());
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved
                if program.max_violation(&x) <= settings.accept_tol * (1.0 + x.amax()) =>
            {
                SolveStatus::Optimal
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            _ => SolveStatus::NumericalFailure,
        };
        if status == SolveStatus::Optimal {
            let objective = program.objective_value(&x);
            SolveOutcome { status, primal: Some(x), objective: Some(objective), stats }
        } else {
            SolveOutcome { status, primal: None, objective: None, stats }
        }
    }
}

/// Solves with the default backend.
pub fn solve(program: &ConicProgram, settings: &SolveSettings) -> SolveOutcome {
    Clarabel.solve(program, settings)
}

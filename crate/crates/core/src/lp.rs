//! Dense linear programming over free variables: `max cᵀx s.t. A x ≤ b`.
//!
//! The polytope engine only ever solves LPs in a handful of variables but with
//! possibly thousands of rows, so the solver runs the simplex method on the
//! dual standard form `min bᵀy s.t. Aᵀy = c, y ≥ 0`. Its tableau has one row
//! per primal variable; the primal optimum is read back from the simplex
//! multipliers of the final basis.

use crate::linalg::{Mat, Vector};

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-10;
const PHASE1_TOL: f64 = 1e-9;
/// Pivots before Dantzig pricing gives way to Bland's rule.
const DANTZIG_BUDGET: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { value: f64, point: Vector },
    Infeasible,
    Unbounded,
}

impl LpOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            LpOutcome::Optimal { value, .. } => Some(*value),
            _ => None,
        }
    }
}

/// Maximizes `cᵀx` over `{x : A x ≤ b}`.
pub fn maximize(c: &[f64], a: &Mat, b: &[f64]) -> LpOutcome {
    let n = a.ncols();
    assert_eq!(c.len(), n, "objective length must match the variable count");
    assert_eq!(b.len(), a.nrows(), "one offset per row");

    if n == 0 {
        return if b.iter().all(|&bi| bi >= -PHASE1_TOL) {
            LpOutcome::Optimal { value: 0.0, point: Vector::zeros(0) }
        } else {
            LpOutcome::Infeasible
        };
    }

    match solve_dual(c, a, b) {
        DualResult::Optimal { value, point } => LpOutcome::Optimal { value, point },
        DualResult::Unbounded => LpOutcome::Infeasible,
        DualResult::Infeasible => {
            if find_feasible_point(a, b).is_some() {
                LpOutcome::Unbounded
            } else {
                LpOutcome::Infeasible
            }
        }
    }
}

/// Returns a point of `{x : A x ≤ b}` (within `1e-9`), or `None` when empty.
pub fn find_feasible_point(a: &Mat, b: &[f64]) -> Option<Vector> {
    let (m, n) = a.shape();
    if m == 0 {
        return Some(Vector::zeros(n));
    }
    // max -t  s.t.  A x - t ≤ b,  -t ≤ 1. Always feasible and bounded.
    let mut aug = Mat::zeros(m + 1, n + 1);
    aug.view_mut((0, 0), (m, n)).copy_from(a);
    for i in 0..m {
        aug[(i, n)] = -1.0;
    }
    aug[(m, n)] = -1.0;
    let mut rhs = b.to_vec();
    rhs.push(1.0);
    let mut obj = vec![0.0; n + 1];
    obj[n] = -1.0;
    match solve_dual(&obj, &aug, &rhs) {
        DualResult::Optimal { value, point } if -value <= PHASE1_TOL => {
            Some(point.rows(0, n).into_owned())
        }
        _ => None,
    }
}

enum DualResult {
    Optimal { value: f64, point: Vector },
    /// Dual infeasible: the primal is infeasible or unbounded.
    Infeasible,
    /// Dual unbounded: the primal is infeasible.
    Unbounded,
}

struct Tableau {
    /// `n` rows of `[m structural | n artificial | rhs]`.
    t: Mat,
    basis: Vec<usize>,
    m: usize,
    n: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.t[(i, self.m + self.n)]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let width = self.t.ncols();
        let p = self.t[(row, col)];
        for j in 0..width {
            self.t[(row, j)] /= p;
        }
        for i in 0..self.n {
            if i == row {
                continue;
            }
            let f = self.t[(i, col)];
            if f != 0.0 {
                for j in 0..width {
                    let delta = f * self.t[(row, j)];
                    self.t[(i, j)] -= delta;
                }
            }
        }
        self.basis[row] = col;
    }

    /// Runs simplex iterations for `cost` over columns `< allowed`.
    /// Returns `false` if the objective is unbounded below.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> bool {
        let mut iterations = 0usize;
        loop {
            iterations += 1;
            assert!(iterations < 200_000, "simplex failed to terminate");
            let bland = iterations > DANTZIG_BUDGET;

            let mut entering = None;
            let mut best = -COST_TOL;
            for j in 0..allowed {
                if self.basis.contains(&j) {
                    continue;
                }
                let mut d = cost[j];
                for i in 0..self.n {
                    d -= cost[self.basis[i]] * self.t[(i, j)];
                }
                if d < best {
                    entering = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(col) = entering else {
                return true;
            };

            let mut leaving: Option<(usize, f64)> = None;
            for i in 0..self.n {
                let coef = self.t[(i, col)];
                if coef > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / coef;
                    let better = match leaving {
                        None => true,
                        Some((r, best_ratio)) => {
                            ratio < best_ratio - 1e-14
                                || (ratio <= best_ratio + 1e-14 && self.basis[i] < self.basis[r])
                        }
                    };
                    if better {
                        leaving = Some((i, ratio));
                    }
                }
            }
            match leaving {
                Some((row, _)) => self.pivot(row, col),
                None => return false,
            }
        }
    }
}

fn solve_dual(c: &[f64], a: &Mat, b: &[f64]) -> DualResult {
    let (m, n) = a.shape();
    let width = m + n + 1;
    let mut t = Mat::zeros(n, width);
    let mut sign = vec![1.0; n];
    for i in 0..n {
        if c[i] < 0.0 {
            sign[i] = -1.0;
        }
        for j in 0..m {
            t[(i, j)] = sign[i] * a[(j, i)];
        }
        t[(i, m + i)] = 1.0;
        t[(i, m + n)] = sign[i] * c[i];
    }
    let mut tab = Tableau { t, basis: (m..m + n).collect(), m, n };

    // Phase 1: drive the artificials out.
    let mut cost1 = vec![0.0; m + n];
    for c1 in cost1.iter_mut().skip(m) {
        *c1 = 1.0;
    }
    tab.optimize(&cost1, m);
    let infeasibility: f64 = (0..n).filter(|&i| tab.basis[i] >= m).map(|i| tab.rhs(i)).sum();
    let scale = 1.0 + c.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if infeasibility > PHASE1_TOL * scale {
        return DualResult::Infeasible;
    }
    for i in 0..n {
        if tab.basis[i] < m {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for j in 0..m {
            let v = tab.t[(i, j)].abs();
            if v > 1e-9 && !tab.basis.contains(&j) && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            tab.pivot(i, j);
        }
    }

    // Phase 2.
    let mut cost2 = vec![0.0; m + n];
    cost2[..m].copy_from_slice(b);
    if !tab.optimize(&cost2, m) {
        return DualResult::Unbounded;
    }

    let mut point = Vector::zeros(n);
    for i in 0..n {
        let mut pi = 0.0;
        for r in 0..n {
            pi += cost2[tab.basis[r]] * tab.t[(r, m + i)];
        }
        point[i] = sign[i] * pi;
    }
    let value = c.iter().zip(point.iter()).map(|(ci, xi)| ci * xi).sum();
    DualResult::Optimal { value, point }
}

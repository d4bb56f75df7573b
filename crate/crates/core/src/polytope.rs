//! Halfspace-representation polytopes `{x : a_iᵀx ≤ b_i}`.
//!
//! Rows are stored with unit-norm normals. All operations are pure; the empty
//! set has a canonical form (a single row `0ᵀx ≤ −1` with the `empty` flag
//! set) on which every operation short-circuits.

use serde::{Deserialize, Serialize};

use crate::linalg::{Mat, Vector};
use crate::lp::{self, LpOutcome};
use crate::sysmodel::ParameterHull;

/// Tolerance of the LP-based redundancy and containment tests.
pub const LP_TOL: f64 = 1e-8;
/// Tolerance of pointwise membership.
pub const POINT_TOL: f64 = 1e-9;
/// Normals closer than this (after normalization) are merged.
const DUPLICATE_TOL: f64 = 1e-9;
const ZERO_ROW: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolytopeRepr", try_from = "PolytopeRepr")]
pub struct Polytope {
    dim: usize,
    a: Mat,
    b: Vector,
    empty: bool,
}

impl Polytope {
    /// Builds a polytope from rows `(a, b)`, normalizing each normal.
    ///
    /// Zero rows with `b ≥ 0` are dropped; a zero row with `b < 0` yields the
    /// empty polytope.
    pub fn from_rows<I>(dim: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = (Vector, f64)>,
    {
        let mut normals: Vec<f64> = Vec::new();
        let mut offsets = Vec::new();
        for (a, b) in rows {
            assert_eq!(a.len(), dim, "row length must equal the polytope dimension");
            let norm = a.norm();
            if norm < ZERO_ROW {
                if b < -ZERO_ROW {
                    return Self::empty(dim);
                }
                continue;
            }
            normals.extend(a.iter().map(|v| v / norm));
            offsets.push(b / norm);
        }
        let m = offsets.len();
        Self { dim, a: Mat::from_row_slice(m, dim, &normals), b: Vector::from_vec(offsets), empty: false }
    }

    /// Rows of `a` with offsets `b`.
    pub fn from_matrix(a: &Mat, b: &Vector) -> Self {
        assert_eq!(a.nrows(), b.len(), "one offset per row");
        let dim = a.ncols();
        Self::from_rows(dim, (0..a.nrows()).map(|i| (a.row(i).transpose(), b[i])))
    }

    /// Axis-aligned box `lower ≤ x ≤ upper`.
    pub fn boxed(lower: &[f64], upper: &[f64]) -> Self {
        assert_eq!(lower.len(), upper.len());
        let n = lower.len();
        let mut rows = Vec::with_capacity(2 * n);
        for i in 0..n {
            let mut e = Vector::zeros(n);
            e[i] = 1.0;
            rows.push((e.clone(), upper[i]));
            rows.push((-e, -lower[i]));
        }
        Self::from_rows(n, rows)
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, a: Mat::zeros(1, dim), b: Vector::from_element(1, -1.0), empty: true }
    }

    /// The whole space (no rows).
    pub fn universe(dim: usize) -> Self {
        Self { dim, a: Mat::zeros(0, dim), b: Vector::zeros(0), empty: false }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        if self.empty {
            0
        } else {
            self.b.len()
        }
    }

    pub fn normals(&self) -> &Mat {
        &self.a
    }

    pub fn offsets(&self) -> &Vector {
        &self.b
    }

    /// Iterates `(a_i, b_i)`; yields nothing for the canonical empty set.
    pub fn rows(&self) -> impl Iterator<Item = (Vector, f64)> + '_ {
        (0..self.num_rows()).map(move |i| (self.a.row(i).transpose(), self.b[i]))
    }

    /// True when flagged empty or when the rows admit no point.
    pub fn is_empty(&self) -> bool {
        self.empty || lp::find_feasible_point(&self.a, self.b.as_slice()).is_none()
    }

    pub fn is_flagged_empty(&self) -> bool {
        self.empty
    }

    /// `max cᵀx` over the polytope.
    pub fn maximize(&self, c: &[f64]) -> LpOutcome {
        if self.empty {
            return LpOutcome::Infeasible;
        }
        lp::maximize(c, &self.a, self.b.as_slice())
    }

    pub fn contains_point(&self, x: &Vector) -> bool {
        self.contains_point_tol(x, POINT_TOL)
    }

    pub fn contains_point_tol(&self, x: &Vector, tol: f64) -> bool {
        assert_eq!(x.len(), self.dim, "point dimension mismatch");
        if self.empty {
            return false;
        }
        self.max_violation(x) <= tol
    }

    /// `max_i (a_iᵀx − b_i)`, or `−∞` without rows.
    pub fn max_violation(&self, x: &Vector) -> f64 {
        (&self.a * x - &self.b).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Drops every row implied by the others.
    pub fn remove_redundancy(&self) -> Polytope {
        if self.empty {
            return Self::empty(self.dim);
        }
        let deduped = self.merge_duplicates();
        if lp::find_feasible_point(&deduped.a, deduped.b.as_slice()).is_none() {
            return Self::empty(self.dim);
        }
        let candidates: Vec<usize> = match deduped.interior_point() {
            Some(z) => deduped.clarkson_candidates(&z),
            None => (0..deduped.b.len()).collect(),
        };
        let kept = deduped.sequential_filter(candidates);
        deduped.select_rows(&kept)
    }

    /// Center of the largest inscribed ball when its radius is not negligible.
    fn interior_point(&self) -> Option<Vector> {
        let (m, n) = (self.b.len(), self.dim);
        // max t  s.t.  a_iᵀx + t ≤ b_i (unit normals),  t ≤ 1.
        let mut a = Mat::zeros(m + 1, n + 1);
        a.view_mut((0, 0), (m, n)).copy_from(&self.a);
        for i in 0..=m {
            a[(i, n)] = 1.0;
        }
        let mut b: Vec<f64> = self.b.iter().copied().collect();
        b.push(1.0);
        let mut c = vec![0.0; n + 1];
        c[n] = 1.0;
        match lp::maximize(&c, &a, &b) {
            LpOutcome::Optimal { point, .. } if point[n] > 1e-7 => Some(point.rows(0, n).into_owned()),
            _ => None,
        }
    }

    /// Clarkson's output-sensitive redundancy detection from interior point `z`.
    ///
    /// Returns a superset of the irredundant rows; each row is tested against
    /// the rows already found essential, and every failed test uncovers a new
    /// essential row by ray shooting from `z`.
    fn clarkson_candidates(&self, z: &Vector) -> Vec<usize> {
        let m = self.b.len();
        let slack: Vec<f64> = (0..m).map(|j| self.b[j] - self.a.row(j).dot(&z.transpose())).collect();
        let mut essential: Vec<usize> = Vec::new();
        let mut is_essential = vec![false; m];
        for i in 0..m {
            if is_essential[i] {
                continue;
            }
            loop {
                let mut a = Mat::zeros(essential.len() + 1, self.dim);
                let mut b = Vec::with_capacity(essential.len() + 1);
                for (k, &r) in essential.iter().enumerate() {
                    a.row_mut(k).copy_from(&self.a.row(r));
                    b.push(self.b[r]);
                }
                a.row_mut(essential.len()).copy_from(&self.a.row(i));
                b.push(self.b[i] + 1.0);
                let c: Vec<f64> = self.a.row(i).iter().copied().collect();
                let LpOutcome::Optimal { value, point } = lp::maximize(&c, &a, &b) else {
                    // Cannot happen for a bounded test LP over a nonempty set;
                    // keeping the row is the conservative choice.
                    essential.push(i);
                    is_essential[i] = true;
                    break;
                };
                if value <= self.b[i] + LP_TOL {
                    break;
                }
                let dir = &point - z;
                let mut first: Option<(usize, f64)> = None;
                for j in 0..m {
                    let rate = self.a.row(j).dot(&dir.transpose());
                    if rate > 0.0 {
                        let t = slack[j] / rate;
                        if first.is_none_or(|(_, best)| t < best) {
                            first = Some((j, t));
                        }
                    }
                }
                let hit = match first {
                    Some((j, _)) if !is_essential[j] => j,
                    _ => i,
                };
                essential.push(hit);
                is_essential[hit] = true;
                if hit == i {
                    break;
                }
            }
        }
        essential.sort_unstable();
        essential
    }

    /// Exact pass removing rows implied by the remaining candidates.
    fn sequential_filter(&self, mut kept: Vec<usize>) -> Vec<usize> {
        let mut i = 0;
        while i < kept.len() {
            let row = kept[i];
            let others: Vec<usize> = kept.iter().copied().filter(|&r| r != row).collect();
            // Bound the test LP with a_iᵀx ≤ b_i + 1 so it never runs off to infinity.
            let mut a = Mat::zeros(others.len() + 1, self.dim);
            let mut b = Vec::with_capacity(others.len() + 1);
            for (k, &r) in others.iter().enumerate() {
                a.row_mut(k).copy_from(&self.a.row(r));
                b.push(self.b[r]);
            }
            a.row_mut(others.len()).copy_from(&self.a.row(row));
            b.push(self.b[row] + 1.0);
            let c: Vec<f64> = self.a.row(row).iter().copied().collect();
            let redundant = match lp::maximize(&c, &a, &b) {
                LpOutcome::Optimal { value, .. } => value <= self.b[row] + LP_TOL,
                LpOutcome::Unbounded | LpOutcome::Infeasible => false,
            };
            if redundant {
                kept.remove(i);
            } else {
                i += 1;
            }
        }
        kept
    }

    fn select_rows(&self, rows: &[usize]) -> Polytope {
        let mut a = Mat::zeros(rows.len(), self.dim);
        let mut b = Vector::zeros(rows.len());
        for (k, &r) in rows.iter().enumerate() {
            a.row_mut(k).copy_from(&self.a.row(r));
            b[k] = self.b[r];
        }
        Polytope { dim: self.dim, a, b, empty: false }
    }

    /// Merges rows whose normals agree within `1e-9`, keeping the tightest offset.
    fn merge_duplicates(&self) -> Polytope {
        let m = self.b.len();
        let mut order: Vec<usize> = (0..m).collect();
        let key = |i: usize| -> Vec<f64> { self.a.row(i).iter().copied().collect() };
        order.sort_by(|&i, &j| {
            let (ki, kj) = (key(i), key(j));
            ki.iter().zip(&kj).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut alive = vec![true; m];
        let mut offsets = self.b.clone();
        for (p, &i) in order.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            for &j in &order[p + 1..] {
                if self.dim > 0 && self.a[(j, 0)] - self.a[(i, 0)] > DUPLICATE_TOL {
                    break;
                }
                if alive[j] && (self.a.row(i) - self.a.row(j)).amax() <= DUPLICATE_TOL {
                    offsets[i] = offsets[i].min(offsets[j]);
                    alive[j] = false;
                }
            }
        }
        let rows: Vec<usize> = (0..m).filter(|&i| alive[i]).collect();
        let mut out = self.select_rows(&rows);
        for (k, &r) in rows.iter().enumerate() {
            out.b[k] = offsets[r];
        }
        out
    }

    /// Row union followed by redundancy removal.
    pub fn intersect(&self, other: &Polytope) -> Polytope {
        assert_eq!(self.dim, other.dim, "intersect requires equal dimensions");
        if self.empty || other.empty {
            return Self::empty(self.dim);
        }
        self.stack(other).remove_redundancy()
    }

    /// Row union without redundancy removal.
    pub fn stack(&self, other: &Polytope) -> Polytope {
        assert_eq!(self.dim, other.dim, "stack requires equal dimensions");
        if self.empty || other.empty {
            return Self::empty(self.dim);
        }
        let m = self.b.len() + other.b.len();
        let mut a = Mat::zeros(m, self.dim);
        a.rows_mut(0, self.b.len()).copy_from(&self.a);
        a.rows_mut(self.b.len(), other.b.len()).copy_from(&other.a);
        let b = Vector::from_iterator(m, self.b.iter().chain(other.b.iter()).copied());
        Polytope { dim: self.dim, a, b, empty: false }
    }

    /// `self ⊆ other` up to [`LP_TOL`].
    pub fn is_subset(&self, other: &Polytope) -> bool {
        self.is_subset_tol(other, LP_TOL)
    }

    pub fn is_subset_tol(&self, other: &Polytope, tol: f64) -> bool {
        assert_eq!(self.dim, other.dim, "subset test requires equal dimensions");
        if self.is_empty() {
            return true;
        }
        if other.empty {
            return false;
        }
        other.rows().all(|(a, b)| match self.maximize(a.as_slice()) {
            LpOutcome::Optimal { value, .. } => value <= b + tol,
            LpOutcome::Unbounded => false,
            LpOutcome::Infeasible => true,
        })
    }

    /// Mutual containment at `tol`.
    pub fn set_equals(&self, other: &Polytope, tol: f64) -> bool {
        self.is_subset_tol(other, tol) && other.is_subset_tol(self, tol)
    }

    /// Offsets shifted by `eps` (every facet pushed outward).
    pub fn inflate(&self, eps: f64) -> Polytope {
        if self.empty {
            return self.clone();
        }
        Polytope { b: self.b.add_scalar(eps), ..self.clone() }
    }

    /// Offsets multiplied by `factor`.
    pub fn scale_offsets(&self, factor: f64) -> Polytope {
        if self.empty {
            return self.clone();
        }
        Polytope { b: &self.b * factor, ..self.clone() }
    }

    /// Orthogonal projection onto the coordinates in `keep` by Fourier–Motzkin
    /// elimination of every other coordinate.
    pub fn project_eliminate(&self, keep: &[usize]) -> Polytope {
        assert!(!keep.is_empty(), "projection must keep at least one coordinate");
        let mut keep: Vec<usize> = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        assert!(keep.iter().all(|&k| k < self.dim), "kept index out of range");
        if self.empty {
            return Self::empty(keep.len());
        }

        let mut current = self.remove_redundancy();
        if current.empty {
            return Self::empty(keep.len());
        }
        // Original coordinate index of each current column.
        let mut columns: Vec<usize> = (0..self.dim).collect();
        while let Some(pos) = columns.iter().position(|c| !keep.contains(c)) {
            current = eliminate_column(&current, pos);
            columns.remove(pos);
            if current.empty {
                return Self::empty(keep.len());
            }
        }
        current
    }
}

/// One Fourier–Motzkin step: removes column `col` and prunes redundant rows.
fn eliminate_column(p: &Polytope, col: usize) -> Polytope {
    let m = p.b.len();
    let (mut pos, mut neg, mut zero) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..m {
        let c = p.a[(i, col)];
        if c > ZERO_ROW {
            pos.push(i);
        } else if c < -ZERO_ROW {
            neg.push(i);
        } else {
            zero.push(i);
        }
    }
    let new_dim = p.dim - 1;
    let strip = |row: Vector| -> Vector { row.remove_row(col) };
    let mut rows: Vec<(Vector, f64)> = Vec::with_capacity(zero.len() + pos.len() * neg.len());
    for &i in &zero {
        rows.push((strip(p.a.row(i).transpose()), p.b[i]));
    }
    for &i in &pos {
        let ci = p.a[(i, col)];
        for &j in &neg {
            let cj = -p.a[(j, col)];
            let combo = p.a.row(i).transpose() / ci + p.a.row(j).transpose() / cj;
            rows.push((strip(combo), p.b[i] / ci + p.b[j] / cj));
        }
    }
    Polytope::from_rows(new_dim, rows).remove_redundancy()
}

/// Robust one-step controllable set
/// `{μ : ∃v ∈ controls, ∀ℓ : A^ℓμ + B^ℓv + r^ℓ ∈ target}`.
pub fn pre_set(target: &Polytope, hull: &ParameterHull, controls: &Polytope) -> Polytope {
    let (nx, nu) = (hull.nx(), hull.nu());
    assert_eq!(target.dim(), nx, "target dimension must equal the state dimension");
    assert_eq!(controls.dim(), nu, "control set dimension must equal the input dimension");
    if target.empty || controls.empty {
        return Polytope::empty(nx);
    }
    let mut rows = Vec::new();
    for v in hull.vertices() {
        let lifted_a = &target.a * &v.a;
        let lifted_b = &target.a * &v.b;
        let rhs = &target.b - &target.a * &v.r;
        for i in 0..target.b.len() {
            let mut row = Vector::zeros(nx + nu);
            row.rows_mut(0, nx).copy_from(&lifted_a.row(i).transpose());
            row.rows_mut(nx, nu).copy_from(&lifted_b.row(i).transpose());
            rows.push((row, rhs[i]));
        }
    }
    for (g, h) in controls.rows() {
        let mut row = Vector::zeros(nx + nu);
        row.rows_mut(nx, nu).copy_from(&g);
        rows.push((row, h));
    }
    let keep: Vec<usize> = (0..nx).collect();
    Polytope::from_rows(nx + nu, rows).project_eliminate(&keep)
}

/// Returns `{μ : ∀ℓ ∃v ∈ controls, A^ℓ μ + B^ℓ v + r^ℓ ∈ target}`.
///
/// Each vertex may use its own feedforward. Vertices sharing an input matrix
/// share the projection `target ⊕ (−B·controls)`, so the set is assembled
/// from one elimination per distinct `B` followed by affine preimages.
pub fn pre_set_per_vertex(target: &Polytope, hull: &ParameterHull, controls: &Polytope) -> Polytope {
    let (nx, nu) = (hull.nx(), hull.nu());
    assert_eq!(target.dim(), nx, "target dimension must equal the state dimension");
    assert_eq!(controls.dim(), nu, "control set dimension must equal the input dimension");
    if target.empty || controls.empty {
        return Polytope::empty(nx);
    }
    let mut sums: Vec<(&Mat, Polytope)> = Vec::new();
    let mut rows = Vec::new();
    for v in hull.vertices() {
        let idx = match sums.iter().position(|(b, _)| *b == &v.b) {
            Some(i) => i,
            None => {
                // {y : ∃u ∈ controls, y + B u ∈ target}
                let mut lifted = Vec::new();
                for (g, h) in target.rows() {
                    let mut row = Vector::zeros(nx + nu);
                    row.rows_mut(0, nx).copy_from(&g);
                    row.rows_mut(nx, nu).copy_from(&(v.b.transpose() * &g));
                    lifted.push((row, h));
                }
                for (g, h) in controls.rows() {
                    let mut row = Vector::zeros(nx + nu);
                    row.rows_mut(nx, nu).copy_from(&g);
                    lifted.push((row, h));
                }
                let keep: Vec<usize> = (0..nx).collect();
                sums.push((&v.b, Polytope::from_rows(nx + nu, lifted).project_eliminate(&keep)));
                sums.len() - 1
            }
        };
        let sum = &sums[idx].1;
        if sum.empty {
            return Polytope::empty(nx);
        }
        let normals = &sum.a * &v.a;
        let offsets = &sum.b - &sum.a * &v.r;
        for i in 0..offsets.len() {
            rows.push((normals.row(i).transpose(), offsets[i]));
        }
    }
    Polytope::from_rows(nx, rows).remove_redundancy()
}

#[derive(Serialize, Deserialize)]
struct PolytopeRepr {
    dim: usize,
    empty: bool,
    /// Each row is `[a_1, …, a_dim, b]`.
    rows: Vec<Vec<f64>>,
}

impl From<Polytope> for PolytopeRepr {
    fn from(p: Polytope) -> Self {
        let rows = p.rows().map(|(a, b)| a.iter().copied().chain(std::iter::once(b)).collect()).collect();
        PolytopeRepr { dim: p.dim, empty: p.empty, rows }
    }
}

impl TryFrom<PolytopeRepr> for Polytope {
    type Error = String;

    fn try_from(r: PolytopeRepr) -> Result<Self, Self::Error> {
        if r.empty {
            return Ok(Polytope::empty(r.dim));
        }
        if let Some(bad) = r.rows.iter().position(|row| row.len() != r.dim + 1) {
            return Err(format!("polytope row {bad} must have {} entries", r.dim + 1));
        }
        Ok(Polytope::from_rows(
            r.dim,
            r.rows.into_iter().map(|row| (Vector::from_column_slice(&row[..r.dim]), row[r.dim])),
        ))
    }
}

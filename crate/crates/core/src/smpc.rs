//! The online covariance-steering program.
//!
//! Over a window of `N` stages the controls are parameterized as
//! `U = V + K Y`, where `Y = Ā ỹ + D̄ W` is the error process of the
//! uncontrolled system driven by the initial deviation `ỹ ~ N(0, Σ_k)` and
//! the disturbances. Means then follow `X̄ = Āμ_k + B̄V + r̄` and deviations
//! follow `X − X̄ = (I + B̄K) Y`, both affine in `(V, K)`, so the expected
//! quadratic cost, the tightened chance rows and the terminal conditions are
//! all second-order-cone or semidefinite representable.

use serde::{Deserialize, Serialize};

use crate::conic::{self, Affine, Cone, ConicProgram, ProgramBuilder, SolveSettings, SolveStats, SolveStatus};
use crate::linalg::{psd_pinv, psd_sqrt, symmetrize, Mat, Vector};
use crate::sysmodel::{ChanceSpec, GaussianBelief, ParameterHull, StageCost, SystemRealization};
use crate::terminal::{terminal_feedforward, TerminalIngredients};

/// Stacked prediction matrices over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrices {
    pub a_bar: Mat,
    pub b_bar: Mat,
    pub d_bar: Mat,
    pub r_bar: Vector,
    pub nx: usize,
    pub nu: usize,
    pub nw: usize,
    pub horizon: usize,
}

impl BlockMatrices {
    /// Rows of stage `t` (0 ≤ t ≤ N) in a stacked state vector.
    pub fn state_rows(&self, t: usize) -> std::ops::Range<usize> {
        t * self.nx..(t + 1) * self.nx
    }

    /// Rows of stage `t` (0 ≤ t < N) in a stacked control vector.
    pub fn control_rows(&self, t: usize) -> std::ops::Range<usize> {
        t * self.nu..(t + 1) * self.nu
    }

    pub fn ny(&self) -> usize {
        (self.horizon + 1) * self.nx
    }

    pub fn nv(&self) -> usize {
        self.horizon * self.nu
    }
}

/// Builds `Ā, B̄, D̄, r̄` for the realizations `window[0..N]`.
pub fn build_block_matrices(window: &[SystemRealization]) -> BlockMatrices {
    let n = window.len();
    assert!(n >= 1, "window must contain at least one stage");
    let (nx, nu, nw) = (window[0].nx(), window[0].nu(), window[0].nw());
    let mut a_bar = Mat::zeros((n + 1) * nx, nx);
    let mut b_bar = Mat::zeros((n + 1) * nx, n * nu);
    let mut d_bar = Mat::zeros((n + 1) * nx, n * nw);
    let mut r_bar = Vector::zeros((n + 1) * nx);
    a_bar.view_mut((0, 0), (nx, nx)).fill_with_identity();
    for t in 1..=n {
        let sys = &window[t - 1];
        // Stage t follows from stage t−1: x_t = A x_{t−1} + B u_{t−1} + D w_{t−1} + r.
        let prev_a = a_bar.rows((t - 1) * nx, nx).into_owned();
        a_bar.rows_mut(t * nx, nx).copy_from(&(&sys.a * prev_a));
        let prev_b = b_bar.rows((t - 1) * nx, nx).into_owned();
        let mut cur_b = &sys.a * prev_b;
        cur_b.view_mut((0, (t - 1) * nu), (nx, nu)).copy_from(&sys.b);
        b_bar.rows_mut(t * nx, nx).copy_from(&cur_b);
        let prev_d = d_bar.rows((t - 1) * nx, nx).into_owned();
        let mut cur_d = &sys.a * prev_d;
        cur_d.view_mut((0, (t - 1) * nw), (nx, nw)).copy_from(&sys.d);
        d_bar.rows_mut(t * nx, nx).copy_from(&cur_d);
        let prev_r = r_bar.rows((t - 1) * nx, nx).into_owned();
        r_bar.rows_mut(t * nx, nx).copy_from(&(&sys.a * prev_r + &sys.r));
    }
    BlockMatrices { a_bar, b_bar, d_bar, r_bar, nx, nu, nw, horizon: n }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainMode {
    /// Only the blocks `K_{t,t}` are free.
    #[default]
    Diagonal,
    /// Every block `K_{t,i}` with `i ≤ t` is free.
    LowerTriangular,
}

/// Entries `(row, col)` of the stacked gain `K` that are decision variables.
pub fn free_entries(mode: GainMode, nx: usize, nu: usize, horizon: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for t in 0..horizon {
        let first = match mode {
            GainMode::Diagonal => t,
            GainMode::LowerTriangular => 0,
        };
        for i in first..=t {
            for r in 0..nu {
                for c in 0..nx {
                    out.push((t * nu + r, i * nx + c));
                }
            }
        }
    }
    out
}

/// Stacked gain `K` (`N·n_u × (N+1)·n_x`) together with its sparsity mode.
#[derive(Debug, Clone, PartialEq)]
pub struct GainStack {
    pub mode: GainMode,
    pub k: Mat,
    pub nx: usize,
    pub nu: usize,
}

impl GainStack {
    /// Block `K_{t,i}`.
    pub fn block(&self, t: usize, i: usize) -> Mat {
        self.k.view((t * self.nu, i * self.nx), (self.nu, self.nx)).into_owned()
    }

    pub fn horizon(&self) -> usize {
        self.k.nrows() / self.nu.max(1)
    }

    /// True when every nonzero entry lies in the pattern of `mode`.
    pub fn respects(&self, mode: GainMode) -> bool {
        let allowed: std::collections::HashSet<(usize, usize)> =
            free_entries(mode, self.nx, self.nu, self.horizon()).into_iter().collect();
        (0..self.k.nrows()).all(|r| (0..self.k.ncols()).all(|c| self.k[(r, c)] == 0.0 || allowed.contains(&(r, c))))
    }
}

/// `K = L (I − B̄L)⁻¹` for a stacked stage-wise state-feedback gain `L`.
///
/// `L` has the layout of `K`; the result reproduces the closed-loop
/// deviations of `u_t = v_t + L_t (x_t − μ_t)`.
pub fn gains_from_state_feedback(l: &Mat, b_bar: &Mat) -> Mat {
    let ny = b_bar.nrows();
    let m = Mat::identity(ny, ny) - b_bar * l;
    // Forward substitution keeps the block pattern exact.
    let inv = m
        .solve_lower_triangular(&Mat::identity(ny, ny))
        .expect("I − B̄L is unit lower triangular");
    l * inv
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmpcOptions {
    pub mode: GainMode,
    /// Weight the last predicted state with the stage `Q`.
    pub terminal_cost: bool,
}

impl Default for SmpcOptions {
    fn default() -> Self {
        Self { mode: GainMode::Diagonal, terminal_cost: true }
    }
}

/// Problem data of one receding-horizon step, excluding the initial belief.
#[derive(Debug, Clone, Copy)]
pub struct SmpcProblem<'a> {
    /// Realizations for stages `k, …, k+N−1`.
    pub window: &'a [SystemRealization],
    pub cost: &'a StageCost,
    pub spec: &'a ChanceSpec,
    /// `None` drops the terminal mean and covariance constraints.
    pub terminal: Option<&'a TerminalIngredients>,
    pub options: SmpcOptions,
}

/// Variable layout and auxiliary maps of an assembled program.
#[derive(Debug, Clone)]
pub struct ProgramLayout {
    pub blocks: BlockMatrices,
    pub mode: GainMode,
    /// Entries allowed by the gain mode.
    pub pattern: Vec<(usize, usize)>,
    /// Pattern entries acting on components of `Y` with positive variance;
    /// these are the decision variables.
    pub free: Vec<(usize, usize)>,
    pub v_start: usize,
    pub k_start: usize,
    /// Epigraph variables of the four squared-norm cost terms.
    pub epigraph_start: usize,
    pub n_vars: usize,
    pub cov_y: Mat,
    pub s_y: Mat,
    /// Affine maps whose squared norms make up the cost.
    pub cost_terms: Vec<Affine>,
}

impl ProgramLayout {
    /// Decision vector for a given `(V, K)`, with epigraph variables set to
    /// the exact cost terms. Entries acting on zero-variance components are
    /// ignored.
    pub fn point(&self, v: &Vector, k: &Mat) -> Vector {
        let mut z = Vector::zeros(self.n_vars);
        z.rows_mut(self.v_start, v.len()).copy_from(v);
        for (e, &(r, c)) in self.free.iter().enumerate() {
            z[self.k_start + e] = k[(r, c)];
        }
        let outside = (0..k.nrows())
            .flat_map(|r| (0..k.ncols()).map(move |c| (r, c)))
            .filter(|&(r, c)| k[(r, c)] != 0.0 && !self.pattern.contains(&(r, c)))
            .count();
        assert_eq!(outside, 0, "gain has entries outside the pattern of its mode");
        for (i, term) in self.cost_terms.iter().enumerate() {
            z[self.epigraph_start + i] = term.eval(&z).norm_squared();
        }
        z
    }

    pub fn v_of(&self, z: &Vector) -> Vector {
        z.rows(self.v_start, self.blocks.nv()).into_owned()
    }

    pub fn k_of(&self, z: &Vector) -> Mat {
        let mut k = Mat::zeros(self.blocks.nv(), self.blocks.ny());
        for (e, &(r, c)) in self.free.iter().enumerate() {
            k[(r, c)] = z[self.k_start + e];
        }
        k
    }

    pub fn cost_of(&self, z: &Vector) -> f64 {
        self.cost_terms.iter().map(|t| t.eval(z).norm_squared()).sum()
    }
}

/// `G S_Y + G_K K S_Y` as an affine map of the decision vector, vectorized
/// column-major (`p × ny` entries for a `p`-row `G_K`).
fn deviation_map(g: Option<&Mat>, g_k: &Mat, layout: &ProgramLayout) -> Affine {
    let p = g_k.nrows();
    let ny = layout.s_y.ncols();
    let mut out = Affine::zeros(p * ny, layout.n_vars);
    if let Some(g) = g {
        let c = g * &layout.s_y;
        for j in 0..ny {
            for i in 0..p {
                out.constant[i + j * p] = c[(i, j)];
            }
        }
    }
    for (e, &(r, c)) in layout.free.iter().enumerate() {
        let var = layout.k_start + e;
        let col = g_k.column(r);
        if col.iter().all(|&v| v == 0.0) {
            continue;
        }
        for j in 0..ny {
            let s = layout.s_y[(c, j)];
            if s == 0.0 {
                continue;
            }
            for i in 0..p {
                out.coeffs[(i + j * p, var)] += col[i] * s;
            }
        }
    }
    out
}

/// `‖w‖² ≤ t` as the cone constraint `‖(t − 1, 2w)‖ ≤ t + 1`. A constant `w`
/// fixes `t` by an equality instead, which keeps the cone off its boundary.
fn push_squared_norm(builder: &mut ProgramBuilder, w: &Affine, t: usize) {
    let n = w.n_vars();
    if w.coeffs.iter().all(|&c| c == 0.0) {
        let mut fix = Affine::constant(Vector::from_element(1, -w.constant.norm_squared()), n);
        fix.coeffs[(0, t)] = 1.0;
        builder.push(Cone::Zero(1), fix);
        return;
    }
    let mut head = Affine::zeros(2, n);
    head.coeffs[(0, t)] = 1.0;
    head.constant[0] = 1.0;
    head.coeffs[(1, t)] = 1.0;
    head.constant[1] = -1.0;
    let expr = Affine::stack(&[head, w.scale(2.0)]);
    builder.push(Cone::SecondOrder(expr.rows()), expr);
}

/// Pushes `aᵀmean + q·‖spread‖ ≤ b`, i.e. `(b − aᵀmean, q·spread) ∈ SOC`.
fn push_chance_row(builder: &mut ProgramBuilder, slack: Affine, spread: Affine, q: f64) {
    let spread = spread.scale(q);
    if spread.is_zero() {
        builder.push(Cone::Nonnegative(1), slack);
    } else {
        let expr = Affine::stack(&[slack, spread]);
        builder.push(Cone::SecondOrder(expr.rows()), expr);
    }
}

/// Assembles the conic program for the initial belief `belief`.
pub fn build_program(belief: &GaussianBelief, problem: &SmpcProblem<'_>) -> (ConicProgram, ProgramLayout) {
    let blocks = build_block_matrices(problem.window);
    let (nx, nu, n) = (blocks.nx, blocks.nu, blocks.horizon);
    assert_eq!(belief.dim(), nx, "belief dimension must match the state dimension");
    let ny = blocks.ny();
    let nv = blocks.nv();
    let mode = problem.options.mode;
    let free = free_entries(mode, nx, nu, n);

    let cov_y = symmetrize(
        &(&blocks.a_bar * &belief.cov * blocks.a_bar.transpose() + &blocks.d_bar * blocks.d_bar.transpose()),
    );
    // Components of Y with zero variance (the first stage when Σ_k = 0) keep
    // exact zero rows in S_Y, and gains acting on them are dropped: they do
    // not affect any moment and would leave the program with free directions.
    let active: Vec<usize> = (0..ny).filter(|&c| cov_y[(c, c)] > 0.0).collect();
    let sub = Mat::from_fn(active.len(), active.len(), |i, j| cov_y[(active[i], active[j])]);
    let sub_sqrt = psd_sqrt(&sub);
    let mut s_y = Mat::zeros(ny, ny);
    for (i, &r) in active.iter().enumerate() {
        for (j, &c) in active.iter().enumerate() {
            s_y[(r, c)] = sub_sqrt[(i, j)];
        }
    }
    let pattern = free;
    let free: Vec<(usize, usize)> = pattern.iter().copied().filter(|&(_, c)| cov_y[(c, c)] > 0.0).collect();

    let mut builder = ProgramBuilder::new();
    let v_vars = builder.add_vars(nv);
    let k_vars = builder.add_vars(free.len());
    let epi = builder.add_vars(4);
    let n_vars = builder.n_vars();
    for t in epi.clone() {
        builder.set_cost(t, 1.0);
    }
    let mut layout = ProgramLayout {
        blocks,
        mode,
        pattern,
        free,
        v_start: v_vars.start,
        k_start: k_vars.start,
        epigraph_start: epi.start,
        n_vars,
        cov_y,
        s_y,
        cost_terms: Vec::new(),
    };
    let bm = &layout.blocks;

    // X̄ = Āμ + r̄ + B̄V.
    let mut mean_x = Affine::constant(&bm.a_bar * &belief.mean + &bm.r_bar, n_vars);
    mean_x.coeffs.columns_mut(v_vars.start, nv).copy_from(&bm.b_bar);
    let v_expr = Affine::vars(v_vars.clone(), n_vars);

    // Cost weights.
    let q_half = psd_sqrt(&problem.cost.q);
    let r_half = psd_sqrt(&problem.cost.r);
    let mut q_bar = Mat::zeros(ny, ny);
    for t in 0..=n {
        if t < n || problem.options.terminal_cost {
            q_bar.view_mut((t * nx, t * nx), (nx, nx)).copy_from(&q_half);
        }
    }
    let mut r_bar = Mat::zeros(nv, nv);
    for t in 0..n {
        r_bar.view_mut((t * nu, t * nu), (nu, nu)).copy_from(&r_half);
    }
    let mut goal = Vector::zeros(ny);
    for t in 0..=n {
        goal.rows_mut(t * nx, nx).copy_from(&problem.cost.goal);
    }
    let tracking = mean_x.add(&Affine::constant(-goal, n_vars)).left_mul(&q_bar);
    let effort = v_expr.left_mul(&r_bar);
    let state_spread = deviation_map(Some(&q_bar), &(&q_bar * &bm.b_bar), &layout);
    let control_spread = deviation_map(None, &r_bar, &layout);
    layout.cost_terms = vec![tracking, effort, state_spread, control_spread];
    for (i, term) in layout.cost_terms.iter().enumerate() {
        push_squared_norm(&mut builder, term, epi.start + i);
    }
    let bm = &layout.blocks;

    // State chance rows on stages 1..N−1.
    for t in 1..n {
        for row in &problem.spec.state_rows {
            let mut g = Mat::zeros(1, ny);
            g.view_mut((0, t * nx), (1, nx)).copy_from(&row.normal.transpose());
            let slack = Affine::constant(Vector::from_element(1, row.offset), n_vars).add(&mean_x.left_mul(&-&g));
            let spread = deviation_map(Some(&g), &(&g * &bm.b_bar), &layout);
            push_chance_row(&mut builder, slack, spread, row.quantile());
        }
    }
    // Control chance rows on stages 0..N−1.
    for t in 0..n {
        for row in &problem.spec.control_rows {
            let mut g = Mat::zeros(1, nv);
            g.view_mut((0, t * nu), (1, nu)).copy_from(&row.normal.transpose());
            let slack = Affine::constant(Vector::from_element(1, row.offset), n_vars).add(&v_expr.left_mul(&-&g));
            let spread = deviation_map(None, &g, &layout);
            push_chance_row(&mut builder, slack, spread, row.quantile());
        }
    }

    if let Some(term) = problem.terminal {
        let mut e_n = Mat::zeros(nx, ny);
        e_n.view_mut((0, n * nx), (nx, nx)).fill_with_identity();
        let h = term.x_f_mu.normals();
        let hb = term.x_f_mu.offsets();
        if h.nrows() > 0 && !term.x_f_mu.is_flagged_empty() {
            let slack = Affine::constant(hb.clone(), n_vars).add(&mean_x.left_mul(&-(h * &e_n)));
            builder.push(Cone::Nonnegative(slack.rows()), slack);
        } else if term.x_f_mu.is_flagged_empty() {
            // An empty terminal set makes every program infeasible.
            builder.push(Cone::Nonnegative(1), Affine::constant(Vector::from_element(1, -1.0), n_vars));
        }
        // [[Σ_f, M], [Mᵀ, I]] ⪰ 0 with M = E_N (I + B̄K) S_Y.
        let m = deviation_map(Some(&e_n), &(&e_n * &bm.b_bar), &layout);
        let d = nx + ny;
        let mut full = Affine::zeros(d * d, n_vars);
        for j in 0..nx {
            for i in 0..nx {
                full.constant[i + j * d] = term.sigma_f[(i, j)];
            }
        }
        for j in 0..ny {
            full.constant[(nx + j) + (nx + j) * d] = 1.0;
            for i in 0..nx {
                // M(i, j) sits at (i, nx + j) and (nx + j, i).
                let src = i + j * nx;
                let upper = i + (nx + j) * d;
                let lower = (nx + j) + i * d;
                full.constant[upper] = m.constant[src];
                full.constant[lower] = m.constant[src];
                full.coeffs.row_mut(upper).copy_from(&m.coeffs.row(src));
                full.coeffs.row_mut(lower).copy_from(&m.coeffs.row(src));
            }
        }
        builder.push_psd(d, &full);
    }

    (builder.build(), layout)
}

/// Optimal policy and predicted moments of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct SmpcSolution {
    pub belief: GaussianBelief,
    pub v_stack: Vector,
    pub gains: GainStack,
    /// `μ_{t|k}` for `t = k, …, k+N`.
    pub predicted_means: Vec<Vector>,
    /// `Σ_{t|k}` for `t = k, …, k+N`.
    pub predicted_covs: Vec<Mat>,
    pub cost: f64,
    pub blocks: BlockMatrices,
    pub cov_y: Mat,
    pub stats: SolveStats,
}

impl SmpcSolution {
    pub fn horizon(&self) -> usize {
        self.blocks.horizon
    }

    /// Feedforward `v_{t|k}`.
    pub fn v(&self, t: usize) -> Vector {
        self.v_stack.rows(t * self.blocks.nu, self.blocks.nu).into_owned()
    }

    /// Control applied at the first stage for the measured state `x`.
    pub fn first_control(&self, x: &Vector) -> Vector {
        self.v(0) + self.gains.block(0, 0) * (x - &self.belief.mean)
    }

    /// Joint covariance of the stacked `(X, U)` deviations.
    pub fn joint_covariance(&self) -> Mat {
        let ny = self.blocks.ny();
        let nv = self.blocks.nv();
        let mut t = Mat::zeros(ny + nv, ny);
        t.rows_mut(0, ny).copy_from(&(Mat::identity(ny, ny) + &self.blocks.b_bar * &self.gains.k));
        t.rows_mut(ny, nv).copy_from(&self.gains.k);
        symmetrize(&(&t * &self.cov_y * t.transpose()))
    }

    /// Covariance of the control at stage `t`.
    pub fn control_cov(&self, t: usize) -> Mat {
        let k = self.gains.k.rows(t * self.blocks.nu, self.blocks.nu).into_owned();
        symmetrize(&(&k * &self.cov_y * k.transpose()))
    }
}

/// Result of one online solve.
#[derive(Debug, Clone, PartialEq)]
pub enum SmpcOutcome {
    Optimal(Box<SmpcSolution>),
    Infeasible,
    NumericalFailure(String),
}

impl SmpcOutcome {
    pub fn solution(&self) -> Option<&SmpcSolution> {
        match self {
            SmpcOutcome::Optimal(s) => Some(s),
            _ => None,
        }
    }
}

/// Solution fields implied by a decision vector.
pub fn solution_from_point(belief: &GaussianBelief, layout: &ProgramLayout, z: &Vector, stats: SolveStats) -> SmpcSolution {
    let bm = &layout.blocks;
    let (nx, n) = (bm.nx, bm.horizon);
    let v_stack = layout.v_of(z);
    let k = layout.k_of(z);
    let mean_x = &bm.a_bar * &belief.mean + &bm.b_bar * &v_stack + &bm.r_bar;
    let ny = bm.ny();
    let fx = Mat::identity(ny, ny) + &bm.b_bar * &k;
    let cov_x = symmetrize(&(&fx * &layout.cov_y * fx.transpose()));
    let predicted_means = (0..=n).map(|t| mean_x.rows(t * nx, nx).into_owned()).collect();
    let mut predicted_covs: Vec<Mat> =
        (0..=n).map(|t| symmetrize(&cov_x.view((t * nx, t * nx), (nx, nx)).into_owned())).collect();
    // Stage 0 is the initial belief itself; avoid round-off from the factorization.
    predicted_covs[0] = belief.cov.clone();
    SmpcSolution {
        belief: belief.clone(),
        v_stack,
        gains: GainStack { mode: layout.mode, k, nx, nu: bm.nu },
        predicted_means,
        predicted_covs,
        cost: layout.cost_of(z),
        blocks: bm.clone(),
        cov_y: layout.cov_y.clone(),
        stats,
    }
}

pub fn solve_smpc(belief: &GaussianBelief, problem: &SmpcProblem<'_>, settings: &SolveSettings) -> SmpcOutcome {
    let (program, layout) = build_program(belief, problem);
    let out = conic::solve(&program, settings);
    match out.status {
        SolveStatus::Optimal => {
            let z = out.primal.expect("optimal outcome carries a point");
            SmpcOutcome::Optimal(Box::new(solution_from_point(belief, &layout, &z, out.stats)))
        }
        SolveStatus::Infeasible => SmpcOutcome::Infeasible,
        SolveStatus::Unbounded | SolveStatus::NumericalFailure => SmpcOutcome::NumericalFailure(out.stats.backend_status),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Propagate the previous prediction.
    #[default]
    Static,
    /// Recondition on the measured state whenever that stays feasible.
    Dynamic,
}

/// How the belief of a step was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitTag {
    /// First step, point mass at the initial state.
    Initial,
    /// Point mass at the measured state.
    Reconditioned,
    /// One-step prediction of the previous solution.
    OpenLoop,
}

impl InitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitTag::Initial => "initial",
            InitTag::Reconditioned => "reconditioned",
            InitTag::OpenLoop => "open-loop",
        }
    }
}

/// Belief chosen for a step, with the probe result when it was reused.
#[derive(Debug, Clone)]
pub struct Initialized<T> {
    pub belief: GaussianBelief,
    pub tag: InitTag,
    pub probe: Option<T>,
}

/// Selects the belief of the current step.
///
/// `probe` attempts a solve from a candidate belief and returns its result on
/// success; it is only called in dynamic mode after the first step.
pub fn initialize<T>(
    prev: Option<&SmpcSolution>,
    x_measured: &Vector,
    mode: InitMode,
    probe: impl FnOnce(&GaussianBelief) -> Option<T>,
) -> Initialized<T> {
    let Some(prev) = prev else {
        return Initialized {
            belief: GaussianBelief::deterministic(x_measured.clone()),
            tag: InitTag::Initial,
            probe: None,
        };
    };
    if mode == InitMode::Dynamic {
        let candidate = GaussianBelief::deterministic(x_measured.clone());
        if let Some(result) = probe(&candidate) {
            return Initialized { belief: candidate, tag: InitTag::Reconditioned, probe: Some(result) };
        }
    }
    let belief = GaussianBelief::new(prev.predicted_means[1].clone(), prev.predicted_covs[1].clone())
        .unwrap_or_else(|_| GaussianBelief {
            mean: prev.predicted_means[1].clone(),
            cov: crate::linalg::clamp_psd(&prev.predicted_covs[1]),
        });
    Initialized { belief, tag: InitTag::OpenLoop, probe: None }
}

/// A feasible (not optimized) policy for the next window.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub belief: GaussianBelief,
    pub v_stack: Vector,
    /// Lower-triangular gain stack for the next window.
    pub k: Mat,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShiftError {
    #[error("no terminal feedforward keeps the final predicted mean in the terminal set")]
    TerminalFeedforward,
    #[error("next window has {got} stages, expected {expected}")]
    Window { got: usize, expected: usize },
}

/// Shifted candidate for step `k+1` built from the solution at step `k`.
///
/// Stages `k+1, …, k+N−1` reuse the previous feedforwards with stage-wise
/// state feedback `L_t = Cov(u_t, x_t) Σ_t⁺`, which never increases predicted
/// covariances relative to the previous plan; stage `k+N` applies the
/// terminal policy `v + L̃(x − μ)` with `v` keeping the terminal mean set
/// invariant for the realization `next_window[N−1]`. The result is expressed
/// in the lower-triangular disturbance-feedback parameterization.
pub fn shift_candidate(
    prev: &SmpcSolution,
    terminal: &TerminalIngredients,
    next_window: &[SystemRealization],
) -> Result<Candidate, ShiftError> {
    let n = prev.horizon();
    if next_window.len() != n {
        return Err(ShiftError::Window { got: next_window.len(), expected: n });
    }
    let (nx, nu) = (prev.blocks.nx, prev.blocks.nu);
    let joint = prev.joint_covariance();
    let ny = prev.blocks.ny();

    let mut l = Mat::zeros(n * nu, (n + 1) * nx);
    let mut v_stack = Vector::zeros(n * nu);
    for t in 1..n {
        let xs = t * nx;
        let us = ny + t * nu;
        let sxx = joint.view((xs, xs), (nx, nx)).into_owned();
        let sux = joint.view((us, xs), (nu, nx)).into_owned();
        let gain = sux * psd_pinv(&sxx, 1e-12);
        l.view_mut(((t - 1) * nu, (t - 1) * nx), (nu, nx)).copy_from(&gain);
        v_stack.rows_mut((t - 1) * nu, nu).copy_from(&prev.v(t));
    }
    let last = &next_window[n - 1];
    let mu_n = &prev.predicted_means[n];
    let v_term = terminal_feedforward(&terminal.x_f_mu, &terminal.u_safe, &ParameterHull::single(last.clone()), mu_n)
        .ok_or(ShiftError::TerminalFeedforward)?;
    v_stack.rows_mut((n - 1) * nu, nu).copy_from(&v_term);
    l.view_mut(((n - 1) * nu, (n - 1) * nx), (nu, nx)).copy_from(&terminal.gain);

    let blocks = build_block_matrices(next_window);
    let k = gains_from_state_feedback(&l, &blocks.b_bar);
    let belief = GaussianBelief {
        mean: prev.predicted_means[1].clone(),
        cov: symmetrize(&prev.predicted_covs[1]),
    };
    Ok(Candidate { belief, v_stack, k })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64) -> SystemRealization {
        SystemRealization::new(
            Mat::from_element(1, 1, a),
            Mat::from_element(1, 1, b),
            Mat::zeros(1, 1),
            Vector::zeros(1),
        )
        .unwrap()
    }

    #[test]
    fn one_step_blocks() {
        let bm = build_block_matrices(&[scalar(2.0, 3.0)]);
        assert_eq!(bm.a_bar.as_slice(), &[1.0, 2.0]);
        assert_eq!(bm.b_bar.as_slice(), &[0.0, 3.0]);
    }

    #[test]
    fn two_step_blocks() {
        let bm = build_block_matrices(&[scalar(2.0, 1.0), scalar(2.0, 1.0)]);
        assert_eq!(bm.a_bar.as_slice(), &[1.0, 2.0, 4.0]);
        assert_eq!(bm.b_bar, Mat::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 2.0, 1.0]));
    }

    #[test]
    fn time_varying_products() {
        let bm = build_block_matrices(&[scalar(1.0, 1.0), scalar(3.0, 1.0)]);
        assert_eq!(bm.a_bar.as_slice(), &[1.0, 1.0, 3.0]);
    }

    #[test]
    fn free_entry_patterns() {
        assert_eq!(free_entries(GainMode::Diagonal, 1, 1, 3), vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(free_entries(GainMode::LowerTriangular, 1, 1, 2), vec![(0, 0), (1, 0), (1, 1)]);
    }
}

//! Closed-loop receding-horizon simulation and Monte Carlo studies.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conic::SolveSettings;
use crate::linalg::Vector;
use crate::smpc::{initialize, solve_smpc, InitMode, InitTag, SmpcOptions, SmpcOutcome, SmpcProblem, SmpcSolution};
use crate::sysmodel::{propagate, sample_noise, ChanceSpec, GaussianBelief, ParameterHull, StageCost, SystemRealization};
use crate::terminal::TerminalIngredients;

/// Standard normal quantile of a two-sided 95% interval.
pub const Z_95: f64 = 1.959963985;

/// A closed-loop experiment: uncertainty model, schedule and constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Hull used for the robust terminal ingredients.
    pub hull: ParameterHull,
    /// Single realization used for the nominal-ingredient ablation.
    pub nominal: SystemRealization,
    /// Realizations per step; at least `steps + horizon − 1` entries.
    pub schedule: Vec<SystemRealization>,
    pub spec: ChanceSpec,
    pub cost: StageCost,
    pub horizon: usize,
    pub steps: usize,
    pub x0: Vector,
}

impl Scenario {
    pub fn window(&self, k: usize) -> &[SystemRealization] {
        &self.schedule[k..k + self.horizon]
    }
}

/// Settings shared by every trial of a study.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrialSettings {
    pub init: InitMode,
    pub smpc: SmpcOptions,
    pub solver: SolveSettings,
}

/// One closed-loop step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub init: InitTag,
    pub feasible: bool,
    /// Stage cost `(x − x_g)ᵀQ(x − x_g) + uᵀRu` of the applied pair.
    pub cost: f64,
}

/// How a trial ended early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Stop {
    Infeasible { k: usize },
    SolverFailure { k: usize, status: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub rows: Vec<StepRow>,
    /// Step at which the online program was infeasible.
    pub infeasible_at: Option<usize>,
    pub stop: Option<Stop>,
    /// Per step: violation flags of the original state rows, then control rows.
    pub violations: Vec<Vec<bool>>,
    /// Steps at which the belief was reconditioned on the measured state.
    pub tau_history: Vec<usize>,
    /// Disturbance samples `w_k` applied after each logged step.
    pub noise: Vec<Vec<f64>>,
    /// State after the last logged step; for a stopped trial, the state the
    /// failed program started from.
    pub final_state: Vec<f64>,
}

impl TrialRecord {
    pub fn total_cost(&self) -> f64 {
        self.rows.iter().map(|r| r.cost).sum()
    }

    /// CSV with columns `k, x0.., u0.., init_tag, feasible, cost`.
    ///
    /// A stopped trial ends with one row at the failing step: the measured
    /// state, `NaN` inputs and cost, the stop kind as tag and `feasible = false`.
    pub fn to_csv(&self) -> String {
        let nx = self.rows.first().map_or(self.final_state.len(), |r| r.x.len());
        let nu = self.rows.first().map_or(0, |r| r.u.len());
        let mut out = String::from("k");
        for i in 0..nx {
            write!(out, ",x{i}").unwrap();
        }
        for i in 0..nu {
            write!(out, ",u{i}").unwrap();
        }
        out.push_str(",init_tag,feasible,cost\n");
        for row in &self.rows {
            write!(out, "{}", row.k).unwrap();
            for v in row.x.iter().chain(&row.u) {
                write!(out, ",{}", fmt_float(*v)).unwrap();
            }
            writeln!(out, ",{},{},{}", row.init.as_str(), row.feasible, fmt_float(row.cost)).unwrap();
        }
        if let Some(stop) = &self.stop {
            let (k, tag) = match stop {
                Stop::Infeasible { k } => (k, "infeasible"),
                Stop::SolverFailure { k, .. } => (k, "solver-failure"),
            };
            write!(out, "{k}").unwrap();
            for v in self.final_state.iter().chain(std::iter::repeat_n(&f64::NAN, nu)) {
                write!(out, ",{}", fmt_float(*v)).unwrap();
            }
            writeln!(out, ",{tag},false,NaN").unwrap();
        }
        out
    }
}

/// Fixed 17-significant-digit formatting so text outputs round-trip exactly.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Runs one closed-loop trial; `terminal = None` drops terminal constraints.
pub fn run_trial(scenario: &Scenario, terminal: Option<&TerminalIngredients>, settings: &TrialSettings, seed: u64) -> TrialRecord {
    run_trial_timed(scenario, terminal, settings, seed).0
}

/// Like [`run_trial`], also returning the wall time of every solver call.
pub fn run_trial_timed(
    scenario: &Scenario,
    terminal: Option<&TerminalIngredients>,
    settings: &TrialSettings,
    seed: u64,
) -> (TrialRecord, Vec<f64>) {
    assert!(scenario.schedule.len() + 1 >= scenario.steps + scenario.horizon, "schedule too short");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state_rows = &scenario.spec.state_rows;
    let control_rows = &scenario.spec.control_rows;
    let mut record = TrialRecord {
        seed,
        rows: Vec::new(),
        infeasible_at: None,
        stop: None,
        violations: Vec::new(),
        tau_history: Vec::new(),
        noise: Vec::new(),
        final_state: Vec::new(),
    };
    let mut times = Vec::new();
    let mut x = scenario.x0.clone();
    let mut prev: Option<SmpcSolution> = None;

    for k in 0..scenario.steps {
        let problem = SmpcProblem {
            window: scenario.window(k),
            cost: &scenario.cost,
            spec: &scenario.spec,
            terminal,
            options: settings.smpc,
        };
        let mut solve = |belief: &GaussianBelief| {
            let t = Instant::now();
            let out = solve_smpc(belief, &problem, &settings.solver);
            times.push(t.elapsed().as_secs_f64());
            out
        };
        let init = initialize(prev.as_ref(), &x, settings.init, |b| match solve(b) {
            SmpcOutcome::Optimal(s) => Some(s),
            _ => None,
        });
        let outcome = match init.probe {
            Some(s) => SmpcOutcome::Optimal(s),
            None => solve(&init.belief),
        };
        let solution = match outcome {
            SmpcOutcome::Optimal(s) => *s,
            SmpcOutcome::Infeasible => {
                record.infeasible_at = Some(k);
                record.stop = Some(Stop::Infeasible { k });
                break;
            }
            SmpcOutcome::NumericalFailure(status) => {
                record.stop = Some(Stop::SolverFailure { k, status });
                break;
            }
        };
        if init.tag == InitTag::Reconditioned {
            record.tau_history.push(k);
        }
        let u = solution.first_control(&x);
        let mut flags: Vec<bool> = state_rows.iter().map(|r| r.normal.dot(&x) > r.offset).collect();
        flags.extend(control_rows.iter().map(|r| r.normal.dot(&u) > r.offset));
        record.violations.push(flags);
        let dx = &x - &scenario.cost.goal;
        let cost = dx.dot(&(&scenario.cost.q * &dx)) + u.dot(&(&scenario.cost.r * &u));
        record.rows.push(StepRow {
            k,
            x: x.iter().copied().collect(),
            u: u.iter().copied().collect(),
            init: init.tag,
            feasible: true,
            cost,
        });
        let sys = &scenario.schedule[k];
        let w = sample_noise(sys.nw(), &mut rng);
        x = propagate(&x, &u, &w, sys);
        record.noise.push(w.iter().copied().collect());
        prev = Some(solution);
    }
    record.final_state = x.iter().copied().collect();
    (record, times)
}

/// Rate and Wilson interval of one constraint row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowRate {
    pub kind: RowKind,
    pub row: usize,
    pub violations: u64,
    pub exposure: u64,
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowKind {
    State,
    Control,
}

/// Wilson score interval for `successes` out of `n` at normal quantile `z`.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // The bounds at 0 and n are exact endpoints; rounding would leave residue.
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if p == 1.0 { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// Pooled per-row violation rates over every logged step of `records`.
pub fn estimate_violation_rates(records: &[TrialRecord], spec: &ChanceSpec) -> Vec<RowRate> {
    let ns = spec.state_rows.len();
    let total = ns + spec.control_rows.len();
    let mut counts = vec![0u64; total];
    let mut exposure = 0u64;
    for rec in records {
        for flags in &rec.violations {
            exposure += 1;
            for (c, &f) in counts.iter_mut().zip(flags) {
                *c += u64::from(f);
            }
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let (lower, upper) = wilson_interval(v, exposure, Z_95);
            let (kind, row) = if i < ns { (RowKind::State, i) } else { (RowKind::Control, i - ns) };
            RowRate {
                kind,
                row,
                violations: v,
                exposure,
                rate: if exposure > 0 { v as f64 / exposure as f64 } else { 0.0 },
                lower,
                upper,
            }
        })
        .collect()
}

/// Solver wall-time statistics; kept apart from the deterministic summary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub solves: usize,
    pub mean_seconds: f64,
    pub max_seconds: f64,
    pub total_seconds: f64,
}

impl RuntimeStats {
    pub fn from_times(times: &[f64]) -> Self {
        let total: f64 = times.iter().sum();
        Self {
            solves: times.len(),
            mean_seconds: if times.is_empty() { 0.0 } else { total / times.len() as f64 },
            max_seconds: times.iter().copied().fold(0.0, f64::max),
            total_seconds: total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub variant: String,
    pub n_trials: usize,
    pub base_seed: u64,
    /// Trials that hit at least one infeasible program.
    pub infeasibility_count: usize,
    pub solver_failure_count: usize,
    pub rates: Vec<RowRate>,
    pub mean_cost: f64,
    pub max_cost: f64,
    #[serde(skip)]
    pub runtime: RuntimeStats,
}

/// A named terminal configuration of a study.
#[derive(Debug, Clone, Copy)]
pub struct Variant<'a> {
    pub name: &'a str,
    pub terminal: Option<&'a TerminalIngredients>,
}

/// Runs `n_trials` trials per variant with seeds `base_seed + i`.
pub fn run_monte_carlo(
    scenario: &Scenario,
    variants: &[Variant<'_>],
    n_trials: usize,
    base_seed: u64,
    settings: &TrialSettings,
) -> Vec<(MonteCarloSummary, Vec<TrialRecord>)> {
    assert!(n_trials >= 1, "at least one trial");
    variants
        .iter()
        .map(|variant| {
            let mut records = Vec::with_capacity(n_trials);
            let mut times = Vec::new();
            for i in 0..n_trials {
                let (rec, t) = run_trial_timed(scenario, variant.terminal, settings, base_seed + i as u64);
                records.push(rec);
                times.extend(t);
            }
            (summarize(variant.name, scenario, &records, base_seed, RuntimeStats::from_times(&times)), records)
        })
        .collect()
}

pub fn summarize(
    name: &str,
    scenario: &Scenario,
    records: &[TrialRecord],
    base_seed: u64,
    runtime: RuntimeStats,
) -> MonteCarloSummary {
    let costs: Vec<f64> = records.iter().map(TrialRecord::total_cost).collect();
    MonteCarloSummary {
        variant: name.to_string(),
        n_trials: records.len(),
        base_seed,
        infeasibility_count: records.iter().filter(|r| r.infeasible_at.is_some()).count(),
        solver_failure_count: records.iter().filter(|r| matches!(r.stop, Some(Stop::SolverFailure { .. }))).count(),
        rates: estimate_violation_rates(records, &scenario.spec),
        mean_cost: costs.iter().sum::<f64>() / costs.len().max(1) as f64,
        max_cost: costs.iter().copied().fold(0.0, f64::max),
        runtime,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_zero_of_thousand() {
        let (lo, hi) = wilson_interval(0, 1000, Z_95);
        assert_eq!(lo, 0.0);
        assert!(hi < 0.004 && hi > 0.003);
    }

    #[test]
    fn wilson_all() {
        let (lo, hi) = wilson_interval(50, 50, Z_95);
        assert!(lo > 0.9 && hi == 1.0);
    }

    #[test]
    fn float_format_round_trips() {
        let v = 0.1 + 0.2;
        assert_eq!(fmt_float(v).parse::<f64>().unwrap(), v);
    }
}

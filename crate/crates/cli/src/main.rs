//! `cssmpc` command-line front end.

mod config;
mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cssmpc::linalg::sorted_eigenvalues;
use cssmpc::sim::{run_monte_carlo, run_trial, MonteCarloSummary, Scenario, TrialRecord, Variant};
use cssmpc::sysmodel::ParameterHull;
use cssmpc::terminal::{cache_key, lyapunov_margin, synthesize, verify_invariance, TerminalIngredients};
use cssmpc::vehicle::{build_hull, linearize};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig, SystemConfig, VariantName};

#[derive(Debug, Parser)]
#[command(name = "cssmpc", version, about = "Covariance-steering stochastic MPC studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize (or load cached) terminal ingredients and print a report.
    Terminal(Args),
    /// Run one closed-loop trial and write its CSV and plot.
    Simulate(Args),
    /// Run a Monte Carlo study over the configured variants.
    Montecarlo(Args),
    /// Check a config without solving anything.
    Validate(Args),
}

#[derive(Debug, clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    variant: Option<VariantName>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_plot: bool,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("terminal synthesis failed: {0}")]
    Synthesis(String),
    #[error("{0}")]
    MissingIngredients(String),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} finding(s)")]
    Findings(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Findings(_) => 1,
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Synthesis(_) => 3,
            CliError::MissingIngredients(_) => 4,
            CliError::Io { .. } => 5,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Terminal(a) => cmd_terminal(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Montecarlo(a) => cmd_montecarlo(&a),
        Command::Validate(a) => cmd_validate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.into(), source })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io { path: path.into(), source })
}

fn out_dir(args: &Args, config: &ScenarioConfig) -> PathBuf {
    args.out.clone().unwrap_or_else(|| config.out_dir.clone())
}

// ---------------------------------------------------------------------------
// Terminal ingredients cache

/// Checks recorded when the ingredients were synthesized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Certificates {
    lyapunov_margin: f64,
    invariant: bool,
    terminal_in_safe: bool,
    safe_in_state: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
enum CacheEntry {
    Ok { ingredients: Box<TerminalIngredients>, certificates: Certificates },
    Failed { reason: String },
}

fn variant_hull(scenario: &Scenario, variant: VariantName) -> Option<ParameterHull> {
    match variant {
        VariantName::Robust => Some(scenario.hull.clone()),
        VariantName::Nominal => Some(ParameterHull::single(scenario.nominal.clone())),
        VariantName::None => None,
    }
}

fn cache_path(out: &Path, key: &str) -> PathBuf {
    out.join("cache").join(format!("{key}.json"))
}

fn read_cache(path: &Path) -> Result<Option<CacheEntry>, CliError> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Usage(format!("corrupt cache file {}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(CliError::Io { path: path.into(), source }),
    }
}

fn synthesize_entry(config: &ScenarioConfig, scenario: &Scenario, hull: &ParameterHull) -> CacheEntry {
    match synthesize(hull, &scenario.spec, &config.terminal, &config.solver) {
        Ok(ing) => {
            let certificates = Certificates {
                lyapunov_margin: lyapunov_margin(hull, &ing.sigma_f, &ing.gain),
                invariant: verify_invariance(&ing.x_f_mu, &ing.u_safe, hull),
                terminal_in_safe: ing.x_f_mu.is_subset(&ing.x_safe),
                safe_in_state: ing.x_safe.is_subset(&scenario.spec.state_polytope()),
            };
            CacheEntry::Ok { ingredients: Box::new(ing), certificates }
        }
        Err(e) => CacheEntry::Failed { reason: e.to_string() },
    }
}

fn report(variant: VariantName, key: &str, hit: bool, entry: &CacheEntry) -> String {
    let mut lines = vec![
        format!("variant: {}", variant.as_str()),
        format!("cache: {} ({key})", if hit { "hit" } else { "miss" }),
    ];
    match entry {
        CacheEntry::Ok { ingredients: ing, certificates: c } => {
            let eig: Vec<String> = sorted_eigenvalues(&ing.sigma_f).iter().map(|v| format!("{v:.6e}")).collect();
            let gain: Vec<String> = ing.gain.iter().map(|v| format!("{v:.6}")).collect();
            lines.push(format!("sigma_f eigenvalues: [{}]", eig.join(", ")));
            lines.push(format!("terminal gain (column-major): [{}]", gain.join(", ")));
            lines.push(format!("x_safe rows: {}", ing.x_safe.num_rows()));
            lines.push(format!("u_safe rows: {}", ing.u_safe.num_rows()));
            lines.push(format!("x_f_mu facets: {}", ing.x_f_mu.num_rows()));
            lines.push(format!("iterations: {}", ing.iteration_count));
            lines.push(format!("lyapunov margin: {:.3e}", c.lyapunov_margin));
            lines.push(format!("invariance certificate: {}", pass(c.invariant)));
            lines.push(format!("x_f_mu within x_safe: {}", pass(c.terminal_in_safe)));
            lines.push(format!("x_safe within state constraints: {}", pass(c.safe_in_state)));
        }
        CacheEntry::Failed { reason } => lines.push(format!("synthesis failed: {reason}")),
    }
    lines.join("\n")
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

/// Cached ingredients of a terminal-requiring variant.
fn load_ingredients(
    out: &Path,
    config: &ScenarioConfig,
    scenario: &Scenario,
    variant: VariantName,
) -> Result<Option<TerminalIngredients>, CliError> {
    let Some(hull) = variant_hull(scenario, variant) else { return Ok(None) };
    let key = cache_key(&hull, &scenario.spec, &config.terminal);
    let path = cache_path(out, &key);
    match read_cache(&path)? {
        Some(CacheEntry::Ok { ingredients, .. }) => Ok(Some(*ingredients)),
        Some(CacheEntry::Failed { reason }) => Err(CliError::MissingIngredients(format!(
            "{} ingredients are unavailable: {reason}",
            variant.as_str()
        ))),
        None => Err(CliError::MissingIngredients(format!(
            "no cached {v} ingredients at {}; run `cssmpc terminal --variant {v}` first",
            path.display(),
            v = variant.as_str()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_terminal(args: &Args) -> Result<(), CliError> {
    let config = ScenarioConfig::load(&args.config)?;
    let scenario = config.scenario()?;
    let variant = args.variant.unwrap_or(VariantName::Robust);
    let hull = variant_hull(&scenario, variant)
        .ok_or_else(|| CliError::Usage("variant `none` has no terminal ingredients".into()))?;
    let out = out_dir(args, &config);
    let key = cache_key(&hull, &scenario.spec, &config.terminal);
    let path = cache_path(&out, &key);
    let (entry, hit) = match read_cache(&path)? {
        Some(entry) => (entry, true),
        None => {
            let entry = synthesize_entry(&config, &scenario, &hull);
            write(&path, &serde_json::to_string_pretty(&entry).expect("cache entry serializes"))?;
            (entry, false)
        }
    };
    println!("{}", report(variant, &key, hit, &entry));
    println!("cache file: {}", path.display());
    match entry {
        CacheEntry::Ok { .. } => Ok(()),
        CacheEntry::Failed { reason } => Err(CliError::Synthesis(reason)),
    }
}

fn state_labels(config: &ScenarioConfig, nx: usize) -> Vec<String> {
    match config.system {
        SystemConfig::Vehicle(_) => vec!["delta".into(), "e_psi".into(), "e_y".into()],
        SystemConfig::Explicit(_) => (0..nx).map(|i| format!("x{i}")).collect(),
    }
}

fn plot_series(config: &ScenarioConfig, record: &TrialRecord) -> Vec<(String, Vec<f64>)> {
    let nx = record.rows.first().map_or(0, |r| r.x.len());
    let nu = record.rows.first().map_or(0, |r| r.u.len());
    let mut series: Vec<(String, Vec<f64>)> = state_labels(config, nx)
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, record.rows.iter().map(|r| r.x[i]).collect()))
        .collect();
    series.extend((0..nu).map(|j| (format!("u{j}"), record.rows.iter().map(|r| r.u[j]).collect())));
    series
}

fn cmd_simulate(args: &Args) -> Result<(), CliError> {
    let config = ScenarioConfig::load(&args.config)?;
    let scenario = config.scenario()?;
    let variant = args.variant.unwrap_or(VariantName::Robust);
    let seed = args.seed.unwrap_or(config.seed);
    let out = out_dir(args, &config);
    let terminal = load_ingredients(&out, &config, &scenario, variant)?;
    let record = run_trial(&scenario, terminal.as_ref(), &config.trial_settings(), seed);
    let stem = format!("trial_{}_seed{seed}", variant.as_str());
    let csv = out.join(format!("{stem}.csv"));
    write(&csv, &record.to_csv())?;
    println!("wrote {}", csv.display());
    if !args.no_plot {
        let svg = out.join(format!("{stem}.svg"));
        write(&svg, &plot::trajectory_svg(&record, &plot_series(&config, &record)))?;
        println!("wrote {}", svg.display());
    }
    match &record.stop {
        None => println!("completed {} steps", record.rows.len()),
        Some(stop) => println!("stopped early: {}", serde_json::to_string(stop).expect("stop serializes")),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct StudyDocument<'a> {
    /// Trials with at least one infeasible program, per variant.
    infeasibility: BTreeMap<&'a str, usize>,
    summaries: Vec<&'a MonteCarloSummary>,
}

fn cmd_montecarlo(args: &Args) -> Result<(), CliError> {
    let config = ScenarioConfig::load(&args.config)?;
    let scenario = config.scenario()?;
    let out = out_dir(args, &config);
    let names: Vec<VariantName> = match args.variant {
        Some(v) => vec![v],
        None => config.variants.clone(),
    };
    let trials = args.trials.unwrap_or(config.trials);
    if trials == 0 {
        return Err(CliError::Usage("at least one trial is required".into()));
    }
    let seed = args.seed.unwrap_or(config.seed);
    let ingredients = names
        .iter()
        .map(|&v| load_ingredients(&out, &config, &scenario, v))
        .collect::<Result<Vec<_>, _>>()?;
    let variants: Vec<Variant<'_>> =
        names.iter().zip(&ingredients).map(|(v, t)| Variant { name: v.as_str(), terminal: t.as_ref() }).collect();
    let study = run_monte_carlo(&scenario, &variants, trials, seed, &config.trial_settings());

    let dir = out.join("montecarlo");
    let mut runtime = BTreeMap::new();
    for (summary, records) in &study {
        for rec in records {
            write(&dir.join(&summary.variant).join(format!("trial_seed{}.csv", rec.seed)), &rec.to_csv())?;
        }
        runtime.insert(summary.variant.as_str(), summary.runtime.clone());
    }
    let doc = StudyDocument {
        infeasibility: study.iter().map(|(s, _)| (s.variant.as_str(), s.infeasibility_count)).collect(),
        summaries: study.iter().map(|(s, _)| s).collect(),
    };
    write(&dir.join("summary.json"), &(serde_json::to_string_pretty(&doc).expect("summary serializes") + "\n"))?;
    write(&dir.join("runtime.json"), &serde_json::to_string_pretty(&runtime).expect("runtime serializes"))?;

    println!("{:<10} {:>8} {:>12} {:>14}", "variant", "trials", "infeasible", "mean cost");
    for (s, _) in &study {
        println!("{:<10} {:>8} {:>12} {:>14}", s.variant, s.n_trials, s.infeasibility_count, fmt_cost(s.mean_cost));
    }
    println!("wrote {}", dir.join("summary.json").display());
    Ok(())
}

fn fmt_cost(v: f64) -> String {
    format!("{v:.4}")
}

fn cmd_validate(args: &Args) -> Result<(), CliError> {
    let config = match ScenarioConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            println!("schema: {e}");
            return Err(CliError::Findings(1));
        }
    };
    let mut findings: Vec<String> = Vec::new();
    if let SystemConfig::Vehicle(v) = &config.system {
        let hull = build_hull(&v.setup.params, v.setup.nu_bounds, v.setup.rho_bounds);
        if let Some(profile) = &v.profile {
            for (k, (&nu, &rho)) in profile.nu.iter().zip(&profile.rho).enumerate() {
                if nu <= 0.0 || hull.membership(&linearize(&v.setup.params, nu, rho), 1e-8).is_none() {
                    findings.push(format!("hull membership: step {k} (nu = {nu}, rho = {rho}) lies outside the parameter hull"));
                }
            }
        }
    }
    match config.scenario() {
        Ok(sc) => {
            if matches!(config.system, SystemConfig::Explicit(_)) {
                for (k, sys) in sc.schedule.iter().enumerate().take(sc.steps + sc.horizon - 1) {
                    if sc.hull.membership(sys, 1e-8).is_none() {
                        findings.push(format!("hull membership: schedule step {k} lies outside the parameter hull"));
                    }
                }
            }
            println!(
                "dimensions: nx = {}, nu = {}, nw = {}, hull vertices = {}, state rows = {}, control rows = {}, horizon = {}, steps = {}",
                sc.hull.nx(),
                sc.hull.nu(),
                sc.hull.nw(),
                sc.hull.vertices().len(),
                sc.spec.state_rows.len(),
                sc.spec.control_rows.len(),
                sc.horizon,
                sc.steps
            );
        }
        Err(e) => findings.push(format!("schema: {e}")),
    }
    for f in &findings {
        println!("{f}");
    }
    if findings.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(CliError::Findings(findings.len()))
    }
}

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use isfe::equilibrium::{solve_reference, verify_equilibrium, EquilibriumProblem};
use isfe::investor::allocate_capacity;
use isfe::stochastic::{
    case_objectives, compute_metrics, evaluate_deterministic, solve_case, CaseMode, CaseResults, Scenario,
    ScenarioSet,
};
use output::*;

/// Market equilibrium of service prices, facility capacities and traveler
/// flows on a congested network.
#[derive(Parser)]
#[command(name = "isfe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Set the BPR congestion coefficient to zero on every link.
    #[arg(long)]
    no_congestion: bool,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the market-clearing tolerance.
    #[arg(long)]
    tol_mc: Option<f64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured case and write the solution files.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Use the conic reference formulation (small instances only).
        #[arg(long)]
        reference: bool,
    },
    /// Solve the deterministic, stochastic and wait-and-see cases and report
    /// VSS and EVPI.
    Metrics {
        #[command(flatten)]
        common: Common,
    },
    /// Re-solve for each value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Check a written solution against every equilibrium condition.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        solution: PathBuf,
        /// Verification tolerance (default: the configured one).
        #[arg(long)]
        tol: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SweepParam {
    Beta2,
    DemandScale,
    ThetaMax,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Beta2 => "beta2",
            SweepParam::DemandScale => "demand_scale",
            SweepParam::ThetaMax => "theta_max",
        }
    }
}

/// Outcome with its exit code.
enum Failure {
    Config(anyhow::Error),
    NotConverged,
    Verify(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::NotConverged) => {
            eprintln!("error: the equilibrium did not converge; results were written anyway");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Solve { common, reference } => {
            let cfg = setup(&common)?;
            cmd_solve(&cfg, reference)
        }
        Command::Metrics { common } => {
            let cfg = setup(&common)?;
            cmd_metrics(&cfg)
        }
        Command::Sweep { common, param, values } => {
            let cfg = setup(&common)?;
            cmd_sweep(&cfg, param, &values)
        }
        Command::Verify { common, solution, tol } => {
            let cfg = setup(&common)?;
            cmd_verify(&cfg, &solution, tol)
        }
    }
}

fn setup(common: &Common) -> Result<RunConfig> {
    if let Some(n) = common.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")?;
    }
    let mut cfg = RunConfig::from_file(&common.config)?;
    if common.no_congestion {
        cfg.network.no_congestion = true;
    }
    if let Some(seed) = common.seed {
        cfg.scenarios.seed = seed;
    }
    if let Some(tol) = common.tol_mc {
        if !(tol > 0.0) {
            bail!("--tol-mc must be positive");
        }
        cfg.solver.tol_mc = tol;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

/// The scenario sets the individual equilibria of a case were solved over.
fn run_scenarios(case: &CaseResults) -> Vec<ScenarioSet> {
    match case.mode {
        CaseMode::Deterministic => vec![ScenarioSet::single(case.scenarios.mean_theta())],
        CaseMode::Stochastic => vec![case.scenarios.clone()],
        CaseMode::WaitAndSee => case
            .scenarios
            .scenarios()
            .iter()
            .map(|s| ScenarioSet::single(s.theta))
            .collect(),
    }
}

fn solve_reference_case(problem: &EquilibriumProblem, set: &ScenarioSet, mode: CaseMode) -> Result<CaseResults> {
    let solved_over = match mode {
        CaseMode::Deterministic => ScenarioSet::single(set.mean_theta()),
        CaseMode::Stochastic => set.clone(),
        CaseMode::WaitAndSee => bail!("--reference supports the deterministic and stochastic modes"),
    };
    let p = EquilibriumProblem {
        scenarios: solved_over,
        ..problem.clone()
    };
    let sol = solve_reference(&p).context("reference solve")?;
    let (provider, user) = case_objectives(&p, &sol)?;
    Ok(CaseResults {
        mode,
        scenarios: set.clone(),
        capacity: sol.investor.capacity.clone(),
        converged: sol.residuals.converged,
        solutions: vec![sol],
        provider_objective: provider,
        user_utility: user,
        surplus: user.map(|u| provider + u),
    })
}

fn cmd_solve(cfg: &RunConfig, reference: bool) -> Result<(), Failure> {
    let set = cfg.scenario_set()?;
    let loaded = cfg.load(set.clone())?;
    let problem = &loaded.problem;
    let case = if reference {
        solve_reference_case(problem, &set, cfg.mode)?
    } else {
        solve_case(problem, &set, cfg.mode, &cfg.options()).context("solve")?
    };
    let runs: Vec<SolvedRun> = run_scenarios(&case)
        .into_iter()
        .zip(&case.solutions)
        .map(|(scenarios, solution)| SolvedRun {
            scenarios,
            solution: solution.clone(),
        })
        .collect();
    let doc = SolutionDocument {
        schema_version: SCHEMA_VERSION.to_string(),
        mode: case.mode,
        no_congestion: cfg.network.no_congestion,
        provider_objective: case.provider_objective,
        user_utility: case.user_utility,
        surplus: case.surplus,
        converged: case.converged,
        runs,
    };
    let dir = out_dir(cfg)?;
    let net = &problem.network;
    write_json(&dir.join("solution.json"), &doc)?;
    write_prices(&dir.join("prices.csv"), net, &doc.runs)?;
    write_links(&dir.join("links.csv"), net, &doc.runs)?;
    if let Some(profiles) = &loaded.investors {
        let shares = doc
            .runs
            .iter()
            .map(|r| {
                r.solution
                    .investor
                    .capacity
                    .iter()
                    .map(|&c| allocate_capacity(c, profiles))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()
            .context("capacity split")?;
        write_investors(&dir.join("investors.csv"), net, &doc.runs, &shares)?;
    }

    println!("{} case, {} scenario(s)", case.mode.label(), set.len());
    println!("{:>4} {:>12} {:>12} {:>12} {:>6}", "run", "market res", "dual gap", "wardrop gap", "iters");
    for (i, r) in doc.runs.iter().enumerate() {
        let res = &r.solution.residuals;
        println!(
            "{:>4} {:>12.3e} {:>12.3e} {:>12.3e} {:>6}",
            i + 1,
            res.max_market_residual,
            res.duality_gap,
            res.wardrop_gap,
            res.iterations
        );
    }
    println!("provider objective {:.6}", case.provider_objective);
    match case.user_utility {
        Some(u) => println!("user utility       {u:.6}"),
        None => println!("user utility       n/a (beta2 = 0)"),
    }
    println!("written to {}", dir.display());
    if !case.converged {
        return Err(Failure::NotConverged);
    }
    Ok(())
}

fn cmd_metrics(cfg: &RunConfig) -> Result<(), Failure> {
    let set = cfg.scenario_set()?;
    let loaded = cfg.load(set.clone())?;
    let problem = &loaded.problem;
    let opts = cfg.options();
    let solve = |mode| solve_case(problem, &set, mode, &opts).with_context(|| format!("{} case", mode.label()));
    let c1 = solve(CaseMode::Deterministic)?;
    let c2 = solve(CaseMode::Stochastic)?;
    let c3 = solve(CaseMode::WaitAndSee)?;
    let (evaluated, basis) = evaluate_deterministic(problem, &c1, &opts).context("deterministic evaluation")?;
    let metrics = compute_metrics(&evaluated, &c2, &c3).context("metrics")?;

    let dir = out_dir(cfg)?;
    let cases = [&c1, &c2, &c3];
    write_cases(&dir.join("cases.csv"), &cases)?;
    write_case_capacity(&dir.join("case_capacity.csv"), &problem.network, &cases)?;
    write_metrics(&dir.join("metrics.csv"), &metrics, basis)?;
    write_stakeholders(&dir.join("stakeholders.csv"), &metrics)?;
    write_json(&dir.join("scenarios.json"), &set)?;
    write_json(
        &dir.join("metrics.json"),
        &MetricsDocument {
            schema_version: SCHEMA_VERSION.to_string(),
            scenarios: set.clone(),
            cases: cases.iter().map(|c| CaseSummary::from(*c)).collect(),
            deterministic_evaluated: CaseSummary::from(&evaluated),
            vss_basis: basis,
            metrics: metrics.clone(),
        },
    )?;

    println!("{:>14} {:>16} {:>16} {:>16}", "case", "provider", "user", "surplus");
    for c in cases {
        println!(
            "{:>14} {:>16.4} {:>16.4} {:>16.4}",
            c.mode.label(),
            c.provider_objective,
            c.user_utility.unwrap_or(f64::NAN),
            c.surplus.unwrap_or(f64::NAN)
        );
    }
    println!("VSS  provider {:.4}, user {:.4}, surplus {:.4}", metrics.vss_provider, metrics.vss_user, metrics.vss_surplus);
    println!("EVPI provider {:.4}, user {:.4}, surplus {:.4}", metrics.evpi_provider, metrics.evpi_user, metrics.evpi_surplus);
    println!("note: {}", metrics.note);
    println!("written to {}", dir.display());
    if cases.iter().any(|c| !c.converged) || !evaluated.converged {
        return Err(Failure::NotConverged);
    }
    Ok(())
}

/// Expected total travel time of a case.
fn total_travel_time(problem: &EquilibriumProblem, case: &CaseResults) -> f64 {
    let runs = run_scenarios(case);
    let weights: Vec<f64> = match case.mode {
        CaseMode::WaitAndSee => case.scenarios.probs().collect(),
        _ => vec![1.0],
    };
    let mut total = 0.0;
    for ((w, sol), set) in weights.iter().zip(&case.solutions).zip(&runs) {
        for (pi, g) in set.probs().zip(&sol.gcda) {
            let tt: f64 = problem
                .network
                .links()
                .iter()
                .zip(&g.v)
                .map(|(l, &v)| l.time(v) * v)
                .sum();
            total += w * pi * tt;
        }
    }
    total
}

fn mean_prices(case: &CaseResults, k: usize) -> Vec<f64> {
    let runs = run_scenarios(case);
    let weights: Vec<f64> = match case.mode {
        CaseMode::WaitAndSee => case.scenarios.probs().collect(),
        _ => vec![1.0],
    };
    let mut out = vec![0.0; k];
    for ((w, sol), set) in weights.iter().zip(&case.solutions).zip(&runs) {
        for (pi, rho) in set.probs().zip(&sol.prices.rho) {
            for (o, r) in out.iter_mut().zip(rho) {
                *o += w * pi * r;
            }
        }
    }
    out
}

fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<(), Failure> {
    let dir = out_dir(cfg)?;
    let base_set = cfg.scenario_set()?;
    let base = cfg.load(base_set.clone())?.problem;
    let mut rows = Vec::new();
    let mut all_converged = true;
    for &value in values {
        let mut c = cfg.clone();
        let mut set = base_set.clone();
        match param {
            SweepParam::Beta2 => c.utility.beta2 = value,
            SweepParam::DemandScale => {
                if !(value >= 0.0) {
                    return Err(anyhow::anyhow!("demand scale must be nonnegative, got {value}").into());
                }
                let scaled: Vec<Scenario> = set
                    .scenarios()
                    .iter()
                    .map(|s| Scenario {
                        theta: s.theta * value,
                        prob: s.prob,
                    })
                    .collect();
                set = ScenarioSet::new(scaled, set.seed()).context("scaled scenarios")?;
            }
            SweepParam::ThetaMax => {
                c.scenarios.theta_max = value;
                set = c.scenario_set()?;
            }
        }
        let problem = c.load(set.clone())?.problem;
        let case = solve_case(&problem, &set, c.mode, &c.options())
            .with_context(|| format!("{} = {value}", param.name()))?;
        all_converged &= case.converged;
        let max = case.capacity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = case.capacity.iter().copied().fold(f64::INFINITY, f64::min);
        println!(
            "{} = {value}: total travel time {:.4}, capacity dispersion {:.4}{}",
            param.name(),
            total_travel_time(&problem, &case),
            max - min,
            if case.converged { "" } else { " (not converged)" }
        );
        rows.push(SweepRow {
            value,
            total_travel_time: total_travel_time(&problem, &case),
            dispersion: max - min,
            converged: case.converged,
            price: mean_prices(&case, problem.location_count()),
            capacity: case.capacity,
        });
    }
    write_sweep(&dir.join("sweep.csv"), param.name(), &base, &rows)?;
    println!("{} run(s) written to {}", rows.len(), dir.display());
    if !all_converged {
        return Err(Failure::NotConverged);
    }
    Ok(())
}

fn cmd_verify(cfg: &RunConfig, path: &Path, tol: Option<f64>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read solution {}", path.display()))?;
    let doc: SolutionDocument =
        serde_json::from_str(&text).map_err(|e| Failure::Verify(format!("unreadable solution document: {e}")))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Failure::Verify(format!(
            "schema version {} (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    let tol = tol.unwrap_or(cfg.verify_tol());
    if !(tol > 0.0) {
        return Err(anyhow::anyhow!("--tol must be positive").into());
    }
    let mut c = cfg.clone();
    c.network.no_congestion |= doc.no_congestion;
    let mut failures = Vec::new();
    println!(
        "{:>4} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "run", "investor", "market", "dual gap", "wardrop gap", "shares"
    );
    for (i, run) in doc.runs.iter().enumerate() {
        let problem = c.load(run.scenarios.clone())?.problem;
        let report = verify_equilibrium(&run.solution, &problem, tol)
            .map_err(|e| Failure::Verify(format!("run {}: {e}", i + 1)))?;
        let worst = |f: fn(&isfe::gcda::WardropReport) -> f64| report.wardrop.iter().map(f).fold(0.0, f64::max);
        println!(
            "{:>4} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e}",
            i + 1,
            report.investor_residual,
            report.market_residual,
            report.duality_gap,
            worst(|w| w.wardrop_gap),
            worst(|w| w.share_residual)
        );
        for check in report.failed_checks() {
            failures.push(format!("run {}: {check}", i + 1));
        }
    }
    if failures.is_empty() {
        println!("all checks passed at tolerance {tol:e}");
        Ok(())
    } else {
        Err(Failure::Verify(failures.join("; ")))
    }
}

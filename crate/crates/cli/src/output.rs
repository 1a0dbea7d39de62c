//! Result files: one JSON summary per run plus long-format CSV tables.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use isfe::equilibrium::{EquilibriumProblem, EquilibriumSolution};
use isfe::network::Network;
use isfe::stochastic::{CaseMode, CaseResults, MetricsReport, ScenarioSet, VssBasis};

pub const SCHEMA_VERSION: &str = "isfe/1";

/// One equilibrium together with the scenarios it was solved over.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolvedRun {
    pub scenarios: ScenarioSet,
    pub solution: EquilibriumSolution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionDocument {
    pub schema_version: String,
    pub mode: CaseMode,
    pub no_congestion: bool,
    pub provider_objective: f64,
    pub user_utility: Option<f64>,
    pub surplus: Option<f64>,
    pub converged: bool,
    /// One run, or one per scenario for wait-and-see.
    pub runs: Vec<SolvedRun>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseSummary {
    pub mode: CaseMode,
    pub provider_objective: f64,
    pub user_utility: Option<f64>,
    pub surplus: Option<f64>,
    pub capacity: Vec<f64>,
    pub converged: bool,
}

impl From<&CaseResults> for CaseSummary {
    fn from(c: &CaseResults) -> Self {
        CaseSummary {
            mode: c.mode,
            provider_objective: c.provider_objective,
            user_utility: c.user_utility,
            surplus: c.surplus,
            capacity: c.capacity.clone(),
            converged: c.converged,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub schema_version: String,
    pub scenarios: ScenarioSet,
    pub cases: Vec<CaseSummary>,
    /// The deterministic case as it entered VSS.
    pub deterministic_evaluated: CaseSummary,
    pub vss_basis: VssBasis,
    pub metrics: MetricsReport,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))
}

/// Per (run, scenario, location): capacity, supply and price.
pub fn write_prices(path: &Path, network: &Network, runs: &[SolvedRun]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["run", "scenario", "theta", "prob", "node", "capacity", "supply", "price"])?;
    for (r, run) in runs.iter().enumerate() {
        let sol = &run.solution;
        for (xi, sc) in run.scenarios.scenarios().iter().enumerate() {
            for (k, &node) in network.candidates().iter().enumerate() {
                w.serialize((
                    r + 1,
                    xi + 1,
                    sc.theta,
                    sc.prob,
                    node + 1,
                    sol.investor.capacity[k],
                    sol.investor.supply[xi][k],
                    sol.prices.rho[xi][k],
                ))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per (run, scenario, link): flow, utilization and travel time.
pub fn write_links(path: &Path, network: &Network, runs: &[SolvedRun]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "run",
        "scenario",
        "link",
        "tail",
        "head",
        "flow",
        "capacity",
        "flow_capacity_ratio",
        "time",
        "free_flow_time",
    ])?;
    for (r, run) in runs.iter().enumerate() {
        for (xi, g) in run.solution.gcda.iter().enumerate() {
            for (a, (link, &v)) in network.links().iter().zip(&g.v).enumerate() {
                w.serialize((
                    r + 1,
                    xi + 1,
                    a + 1,
                    link.tail + 1,
                    link.head + 1,
                    v,
                    link.capacity,
                    v / link.capacity,
                    link.time(v),
                    link.free_flow_time,
                ))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per location and investor: the capacity each investor builds.
pub fn write_investors(path: &Path, network: &Network, runs: &[SolvedRun], shares: &[Vec<Vec<f64>>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["run", "node", "investor", "capacity"])?;
    for (r, (_, per_loc)) in runs.iter().zip(shares).enumerate() {
        for (&node, split) in network.candidates().iter().zip(per_loc) {
            for (i, c) in split.iter().enumerate() {
                w.serialize((r + 1, node + 1, i + 1, c))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_cases(path: &Path, cases: &[&CaseResults]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["case", "provider_objective", "user_utility", "surplus", "total_capacity", "converged"])?;
    for c in cases {
        w.serialize((
            c.mode.label(),
            c.provider_objective,
            c.user_utility,
            c.surplus,
            c.capacity.iter().sum::<f64>(),
            c.converged,
        ))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_case_capacity(path: &Path, network: &Network, cases: &[&CaseResults]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["case", "node", "capacity"])?;
    for c in cases {
        for (&node, cap) in network.candidates().iter().zip(&c.capacity) {
            w.serialize((c.mode.label(), node + 1, cap))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn basis_label(b: VssBasis) -> &'static str {
    match b {
        VssBasis::FixedCapacity => "fixed_capacity",
        VssBasis::DeterministicObjectives => "deterministic_objectives",
    }
}

/// One wide row with all six metrics.
pub fn write_metrics(path: &Path, m: &MetricsReport, basis: VssBasis) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "vss_provider",
        "vss_user",
        "vss_surplus",
        "evpi_provider",
        "evpi_user",
        "evpi_surplus",
        "vss_basis",
        "note",
    ])?;
    w.serialize((
        m.vss_provider,
        m.vss_user,
        m.vss_surplus,
        m.evpi_provider,
        m.evpi_user,
        m.evpi_surplus,
        basis_label(basis),
        &m.note,
    ))?;
    w.flush()?;
    Ok(())
}

/// The same metrics, one row per stakeholder.
pub fn write_stakeholders(path: &Path, m: &MetricsReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["stakeholder", "vss", "evpi"])?;
    w.serialize(("provider", m.vss_provider, m.evpi_provider))?;
    w.serialize(("user", m.vss_user, m.evpi_user))?;
    w.serialize(("surplus", m.vss_surplus, m.evpi_surplus))?;
    w.flush()?;
    Ok(())
}

pub struct SweepRow {
    pub value: f64,
    pub total_travel_time: f64,
    pub dispersion: f64,
    pub converged: bool,
    pub capacity: Vec<f64>,
    /// Probability-weighted price per location.
    pub price: Vec<f64>,
}

pub fn write_sweep(path: &Path, param: &str, problem: &EquilibriumProblem, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "param",
        "value",
        "node",
        "capacity",
        "mean_price",
        "total_travel_time",
        "capacity_dispersion",
        "converged",
    ])?;
    for row in rows {
        for (k, &node) in problem.network.candidates().iter().enumerate() {
            w.serialize((
                param,
                row.value,
                node + 1,
                row.capacity[k],
                row.price[k],
                row.total_travel_time,
                row.dispersion,
                row.converged,
            ))?;
        }
    }
    w.flush()?;
    Ok(())
}

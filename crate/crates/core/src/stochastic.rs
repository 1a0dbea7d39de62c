//! Demand scenarios, the deterministic / stochastic / wait-and-see cases and
//! the value-of-information metrics built on them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::{
    solve_equilibrium_with, EquilibriumError, EquilibriumOptions, EquilibriumProblem,
    EquilibriumSolution,
};
use crate::gcda::UtilityParams;
use crate::investor::investor_objective;
use crate::network::TripTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StochasticError {
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Multiplier on every OD demand.
    pub theta: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    scenarios: Vec<Scenario>,
    seed: Option<u64>,
}

impl ScenarioSet {
    pub fn new(scenarios: Vec<Scenario>, seed: Option<u64>) -> Result<Self, StochasticError> {
        if scenarios.is_empty() {
            return Err(StochasticError::Domain("empty scenario set".into()));
        }
        if let Some(s) = scenarios
            .iter()
            .find(|s| !(s.theta.is_finite() && s.theta >= 0.0 && s.prob > 0.0 && s.prob <= 1.0))
        {
            return Err(StochasticError::Domain(format!(
                "scenario (theta {}, prob {}) needs theta >= 0 and 0 < prob <= 1",
                s.theta, s.prob
            )));
        }
        let total: f64 = scenarios.iter().map(|s| s.prob).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(StochasticError::Domain(format!(
                "scenario probabilities sum to {total}"
            )));
        }
        Ok(ScenarioSet { scenarios, seed })
    }

    pub fn single(theta: f64) -> Self {
        ScenarioSet {
            scenarios: vec![Scenario { theta, prob: 1.0 }],
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.scenarios.iter().map(|s| s.prob)
    }

    pub fn thetas(&self) -> impl Iterator<Item = f64> + '_ {
        self.scenarios.iter().map(|s| s.theta)
    }

    pub fn mean_theta(&self) -> f64 {
        self.scenarios.iter().map(|s| s.prob * s.theta).sum()
    }
}

/// SplitMix64. Fixed here rather than taken from a crate so a seed maps to
/// the same draws on every platform and version.
struct SplitMix64(u64);

impl SplitMix64 {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on [0, 1) with 53 random bits.
    fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// `n` equally likely demand multipliers drawn uniformly from
/// `[theta_min, theta_max]`.
pub fn generate_scenarios(
    n: usize,
    theta_min: f64,
    theta_max: f64,
    seed: u64,
) -> Result<ScenarioSet, StochasticError> {
    if n == 0 {
        return Err(StochasticError::Domain("at least one scenario is needed".into()));
    }
    if !(theta_min.is_finite() && theta_max.is_finite() && 0.0 <= theta_min && theta_min <= theta_max) {
        return Err(StochasticError::Domain(format!(
            "invalid multiplier range [{theta_min}, {theta_max}]"
        )));
    }
    let mut rng = SplitMix64(seed);
    let prob = 1.0 / n as f64;
    let scenarios = (0..n)
        .map(|_| Scenario {
            theta: (theta_min + rng.next_unit() * (theta_max - theta_min)).min(theta_max),
            prob,
        })
        .collect();
    ScenarioSet::new(scenarios, Some(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseMode {
    /// One equilibrium at the mean multiplier.
    Deterministic,
    /// One equilibrium over all scenarios with a shared capacity.
    Stochastic,
    /// An independent equilibrium per scenario, averaged.
    WaitAndSee,
}

impl CaseMode {
    pub fn label(self) -> &'static str {
        match self {
            CaseMode::Deterministic => "deterministic",
            CaseMode::Stochastic => "stochastic",
            CaseMode::WaitAndSee => "wait_and_see",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResults {
    pub mode: CaseMode,
    /// The scenario set the case was derived from.
    pub scenarios: ScenarioSet,
    /// One solution, or one per scenario for wait-and-see.
    pub solutions: Vec<EquilibriumSolution>,
    /// Expected capacity per location.
    pub capacity: Vec<f64>,
    /// Expected investor profit.
    pub provider_objective: f64,
    /// Expected traveler utility in money units; `None` when `beta2 = 0`
    /// leaves utility without a money value.
    pub user_utility: Option<f64>,
    pub surplus: Option<f64>,
    pub converged: bool,
}

fn with_scenarios(problem: &EquilibriumProblem, scenarios: ScenarioSet) -> EquilibriumProblem {
    EquilibriumProblem {
        scenarios,
        ..problem.clone()
    }
}

/// Provider profit and user utility of one solution under the problem's
/// scenarios. Utility is `None` when `beta2 = 0`.
pub fn case_objectives(
    problem: &EquilibriumProblem,
    solution: &EquilibriumSolution,
) -> Result<(f64, Option<f64>), StochasticError> {
    let probs: Vec<f64> = problem.scenarios.probs().collect();
    let profit = investor_objective(&solution.investor, &solution.prices.rho, &probs, &problem.costs)
        .map_err(EquilibriumError::from)?;
    if problem.params.beta2 == 0.0 {
        return Ok((profit, None));
    }
    let utility = total_utility(solution, &problem.params, &problem.trips, &probs)?;
    Ok((profit, Some(utility)))
}

fn single_case(
    mode: CaseMode,
    source: &ScenarioSet,
    problem: &EquilibriumProblem,
    opts: &EquilibriumOptions,
) -> Result<CaseResults, StochasticError> {
    let solution = solve_equilibrium_with(problem, opts)?;
    let (provider, user) = case_objectives(problem, &solution)?;
    Ok(CaseResults {
        mode,
        scenarios: source.clone(),
        capacity: solution.investor.capacity.clone(),
        converged: solution.residuals.converged,
        solutions: vec![solution],
        provider_objective: provider,
        user_utility: user,
        surplus: user.map(|u| provider + u),
    })
}

/// Solves one information case. The scenarios already on `problem` are
/// ignored in favour of `scenarios`.
pub fn solve_case(
    problem: &EquilibriumProblem,
    scenarios: &ScenarioSet,
    mode: CaseMode,
    opts: &EquilibriumOptions,
) -> Result<CaseResults, StochasticError> {
    match mode {
        CaseMode::Deterministic => {
            let p = with_scenarios(problem, ScenarioSet::single(scenarios.mean_theta()));
            single_case(mode, scenarios, &p, opts)
        }
        CaseMode::Stochastic => {
            let p = with_scenarios(problem, scenarios.clone());
            single_case(mode, scenarios, &p, opts)
        }
        CaseMode::WaitAndSee => {
            let parts: Vec<(EquilibriumSolution, f64, Option<f64>)> = scenarios
                .scenarios()
                .par_iter()
                .map(|s| {
                    let p = with_scenarios(problem, ScenarioSet::single(s.theta));
                    let sol = solve_equilibrium_with(&p, opts)?;
                    let (provider, user) = case_objectives(&p, &sol)?;
                    Ok((sol, provider, user))
                })
                .collect::<Result<_, StochasticError>>()?;
            let k = problem.location_count();
            let mut capacity = vec![0.0; k];
            let (mut provider, mut user) = (0.0, Some(0.0));
            for (s, (sol, pr, us)) in scenarios.scenarios().iter().zip(&parts) {
                for (c, x) in capacity.iter_mut().zip(&sol.investor.capacity) {
                    *c += s.prob * x;
                }
                provider += s.prob * pr;
                user = user.zip(*us).map(|(a, b)| a + s.prob * b);
            }
            Ok(CaseResults {
                mode,
                scenarios: scenarios.clone(),
                converged: parts.iter().all(|p| p.0.residuals.converged),
                solutions: parts.into_iter().map(|p| p.0).collect(),
                capacity,
                provider_objective: provider,
                user_utility: user,
                surplus: user.map(|u| provider + u),
            })
        }
    }
}

/// How the deterministic case entered the value of the stochastic solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VssBasis {
    /// Deterministic capacity held fixed, operations re-cleared in every
    /// scenario.
    FixedCapacity,
    /// The deterministic capacity cannot serve some scenario's inelastic
    /// demand, so the deterministic case objectives are used as they are.
    DeterministicObjectives,
}

/// The deterministic case as it enters VSS: its capacity fixed and the
/// operational markets re-cleared under every scenario. Falls back to the
/// case's own objectives when that capacity is infeasible for some scenario;
/// with a single scenario the case already is its own evaluation.
pub fn evaluate_deterministic(
    problem: &EquilibriumProblem,
    deterministic: &CaseResults,
    opts: &EquilibriumOptions,
) -> Result<(CaseResults, VssBasis), StochasticError> {
    if deterministic.mode != CaseMode::Deterministic {
        return Err(StochasticError::Domain("expected the deterministic case".into()));
    }
    let scenarios = &deterministic.scenarios;
    if scenarios.len() == 1 {
        return Ok((deterministic.clone(), VssBasis::FixedCapacity));
    }
    let p = with_scenarios(problem, scenarios.clone());
    let fixed = EquilibriumOptions {
        fixed_capacity: Some(deterministic.capacity.clone()),
        ..opts.clone()
    };
    match single_case(CaseMode::Deterministic, scenarios, &p, &fixed) {
        Ok(case) => Ok((case, VssBasis::FixedCapacity)),
        Err(StochasticError::Equilibrium(EquilibriumError::Infeasible { scenario, violation, .. })) => {
            log::info!(
                "deterministic capacity short by {:.3}% in scenario {}; using deterministic objectives",
                100.0 * violation,
                scenario + 1
            );
            Ok((deterministic.clone(), VssBasis::DeterministicObjectives))
        }
        Err(e) => Err(e),
    }
}

/// Expected traveler utility divided by `beta2`, in money units.
pub fn total_utility(
    solution: &EquilibriumSolution,
    params: &UtilityParams,
    trips: &TripTable,
    probs: &[f64],
) -> Result<f64, StochasticError> {
    if !(params.beta2 > 0.0) {
        return Err(StochasticError::Domain(
            "utility has no money value when beta2 = 0".into(),
        ));
    }
    if solution.gcda.len() != probs.len() || solution.prices.rho.len() != probs.len() {
        return Err(StochasticError::Domain(format!(
            "solution has {} scenarios, {} probabilities given",
            solution.gcda.len(),
            probs.len()
        )));
    }
    let mut total = 0.0;
    for ((pi, sol), rho) in probs.iter().zip(&solution.gcda).zip(&solution.prices.rho) {
        let mut u = 0.0;
        for (t, trip) in trips.triples().iter().enumerate() {
            let e = trips.pairs()[trip.pair].service;
            let k = trip.location;
            u += sol.q[t]
                * (params.beta0[k] - params.beta1 * sol.tau[t] - params.beta2 * rho[k] * e);
        }
        total += pi * u / params.beta2;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub vss_provider: f64,
    pub vss_user: f64,
    pub vss_surplus: f64,
    pub evpi_provider: f64,
    pub evpi_user: f64,
    pub evpi_surplus: f64,
    pub note: String,
}

pub const METRICS_NOTE: &str =
    "with several self-interested stakeholders VSS and EVPI can be negative for some of them";

/// Differences per stakeholder: VSS = stochastic minus evaluated
/// deterministic, EVPI = wait-and-see minus stochastic.
pub fn compute_metrics(
    deterministic: &CaseResults,
    stochastic: &CaseResults,
    wait_and_see: &CaseResults,
) -> Result<MetricsReport, StochasticError> {
    if deterministic.scenarios != stochastic.scenarios || stochastic.scenarios != wait_and_see.scenarios {
        return Err(StochasticError::Domain(
            "cases were solved over different scenario sets".into(),
        ));
    }
    let user = |c: &CaseResults| {
        c.user_utility.ok_or_else(|| {
            StochasticError::Domain("user utility has no money value when beta2 = 0".into())
        })
    };
    Ok(metrics_from_objectives(
        [deterministic.provider_objective, stochastic.provider_objective, wait_and_see.provider_objective],
        [user(deterministic)?, user(stochastic)?, user(wait_and_see)?],
    ))
}

/// Metrics from (deterministic, stochastic, wait-and-see) objective triples.
pub fn metrics_from_objectives(provider: [f64; 3], user: [f64; 3]) -> MetricsReport {
    let surplus = [0, 1, 2].map(|i| provider[i] + user[i]);
    MetricsReport {
        vss_provider: provider[1] - provider[0],
        vss_user: user[1] - user[0],
        vss_surplus: surplus[1] - surplus[0],
        evpi_provider: provider[2] - provider[1],
        evpi_user: user[2] - user[1],
        evpi_surplus: surplus[2] - surplus[1],
        note: METRICS_NOTE.to_string(),
    }
}

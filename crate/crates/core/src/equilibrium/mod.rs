//! Market equilibrium between the facility investor and travelers.
//!
//! Prices clear every location market in every scenario. Computationally the
//! equilibrium is the saddle point of one convex program whose market-clearing
//! multipliers are `lambda = pi * rho`, so a price iterate can be certified by
//! the gap between a feasible primal value and the Lagrangian dual value.

mod reference;
mod solver;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gcda::{
    solve_gcda_with, verify_wardrop_logit, GcdaError, GcdaOptions, GcdaProblem, GcdaSolution,
    UtilityParams, WardropReport,
};
use crate::investor::{
    investor_objective, optimal_supply, solve_investor, InvestorError, InvestorSolution,
    LocationCost,
};
use crate::network::{Network, NetworkError, TripTable};
use crate::stochastic::ScenarioSet;

pub use reference::{solve_reference, ReferenceLimits};
pub use solver::{solve_equilibrium, solve_equilibrium_with, EquilibriumOptions, StepRule};

/// Relative feasibility tolerance of [`combined_objective`].
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Gcda(#[from] GcdaError),
    #[error(transparent)]
    Investor(#[from] InvestorError),
    #[error("{0}")]
    Domain(String),
    #[error("infeasible point: {constraint} violated in scenario {scenario} by {violation:e}")]
    Infeasible {
        constraint: &'static str,
        scenario: usize,
        violation: f64,
    },
    #[error("instance exceeds reference solver bounds: {0}")]
    SizeBound(String),
    #[error("reference solver failed: {0}")]
    Reference(String),
}

/// Prices per scenario and location, with the matching multipliers
/// `lambda = pi * rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceField {
    pub rho: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
}

impl PriceField {
    pub fn from_rho(rho: Vec<Vec<f64>>, probs: &[f64]) -> Self {
        let lambda = rho
            .iter()
            .zip(probs)
            .map(|(row, pi)| row.iter().map(|r| pi * r).collect())
            .collect();
        PriceField { rho, lambda }
    }

    pub fn uniform(value: f64, probs: &[f64], locations: usize) -> Self {
        Self::from_rho(vec![vec![value; locations]; probs.len()], probs)
    }
}

/// The full market: network, travelers, investor costs and scenarios.
#[derive(Debug, Clone)]
pub struct EquilibriumProblem {
    pub network: Network,
    pub trips: TripTable,
    pub params: UtilityParams,
    pub costs: Vec<LocationCost>,
    pub scenarios: ScenarioSet,
}

impl EquilibriumProblem {
    pub fn new(
        network: Network,
        trips: TripTable,
        params: UtilityParams,
        costs: Vec<LocationCost>,
        scenarios: ScenarioSet,
    ) -> Result<Self, EquilibriumError> {
        let k = network.location_count();
        if costs.len() != k {
            return Err(EquilibriumError::Domain(format!(
                "{} cost entries for {k} locations",
                costs.len()
            )));
        }
        if params.beta0.len() != k {
            return Err(EquilibriumError::Domain(format!(
                "{} attractiveness values for {k} locations",
                params.beta0.len()
            )));
        }
        for c in &costs {
            c.validate()?;
        }
        Ok(EquilibriumProblem {
            network,
            trips,
            params,
            costs,
            scenarios,
        })
    }

    pub fn location_count(&self) -> usize {
        self.network.location_count()
    }

    pub fn scenario_count(&self) -> usize {
        self.scenarios.len()
    }

    /// Total service demand `theta * sum e d` in each scenario.
    pub fn service_demand(&self) -> Vec<f64> {
        let base = self.trips.total_service();
        self.scenarios.thetas().map(|t| t * base).collect()
    }

    /// Locations that some pair with positive demand may use.
    pub fn active_locations(&self) -> Vec<bool> {
        let mut active = vec![false; self.location_count()];
        for t in self.trips.triples() {
            let p = &self.trips.pairs()[t.pair];
            if p.demand > 0.0 && p.service > 0.0 {
                active[t.location] = true;
            }
        }
        active
    }

    /// Whether every cost function is strictly convex, the condition under
    /// which the equilibrium is unique.
    pub fn strictly_convex(&self) -> bool {
        self.costs.iter().all(|c| c.strictly_convex())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Largest `|g - sum e q|`, divided by the scenario's total service demand.
    pub max_market_residual: f64,
    pub duality_gap: f64,
    /// Largest normalized Wardrop gap over scenarios.
    pub wardrop_gap: f64,
    pub primal_objective: f64,
    pub dual_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    pub investor: InvestorSolution,
    pub gcda: Vec<GcdaSolution>,
    pub prices: PriceField,
    pub residuals: ResidualReport,
    /// Capacities held fixed during the solve, if any.
    #[serde(default)]
    pub fixed_capacity: Option<Vec<f64>>,
    /// `(primal, dual)` at every outer iterate.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bound_history: Vec<(f64, f64)>,
}

impl EquilibriumSolution {
    /// The feasible point on the demand side: supplies set to the served
    /// demand and capacities to the largest supply (or the fixed capacities).
    pub fn primal_point(&self, problem: &EquilibriumProblem) -> PrimalPoint {
        primal_point(problem, &self.gcda, self.fixed_capacity.as_deref())
    }
}

/// A point of the convex program: capacities, supplies and per-scenario
/// facility and link flows.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalPoint {
    pub capacity: Vec<f64>,
    pub supply: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

fn primal_point(
    problem: &EquilibriumProblem,
    gcda: &[GcdaSolution],
    fixed: Option<&[f64]>,
) -> PrimalPoint {
    let k = problem.location_count();
    let supply: Vec<Vec<f64>> = gcda
        .iter()
        .map(|s| problem.trips.service_by_location(&s.q, k))
        .collect();
    let capacity = match fixed {
        Some(c) => c.to_vec(),
        None => (0..k)
            .map(|j| supply.iter().map(|g| g[j]).fold(0.0, f64::max))
            .collect(),
    };
    PrimalPoint {
        capacity,
        supply,
        q: gcda.iter().map(|s| s.q.clone()).collect(),
        v: gcda.iter().map(|s| s.v.clone()).collect(),
    }
}

/// `g - sum e q` per scenario and location.
pub fn excess_supply(
    investor: &InvestorSolution,
    gcda: &[GcdaSolution],
    trips: &TripTable,
) -> Result<Vec<Vec<f64>>, EquilibriumError> {
    if investor.supply.len() != gcda.len() {
        return Err(EquilibriumError::Domain(format!(
            "{} supply scenarios but {} assignment scenarios",
            investor.supply.len(),
            gcda.len()
        )));
    }
    let mut out = Vec::with_capacity(gcda.len());
    for (g, sol) in investor.supply.iter().zip(gcda) {
        if sol.q.len() != trips.triple_count() {
            return Err(EquilibriumError::Domain("facility flow length mismatch".into()));
        }
        let served = trips.service_by_location(&sol.q, g.len());
        out.push(g.iter().zip(&served).map(|(a, b)| a - b).collect());
    }
    Ok(out)
}

/// Projected price update `rho <- max(0, rho - eta * excess)`.
pub fn dual_step(prices: &PriceField, excess: &[Vec<f64>], step: f64, probs: &[f64]) -> PriceField {
    let rho = prices
        .rho
        .iter()
        .zip(excess)
        .map(|(row, e)| row.iter().zip(e).map(|(r, x)| (r - step * x).max(0.0)).collect())
        .collect();
    PriceField::from_rho(rho, probs)
}

/// `rho = lambda / pi`.
pub fn recover_prices(lambda: &[Vec<f64>], probs: &[f64]) -> Result<Vec<Vec<f64>>, EquilibriumError> {
    if lambda.len() != probs.len() {
        return Err(EquilibriumError::Domain(format!(
            "{} multiplier rows for {} scenarios",
            lambda.len(),
            probs.len()
        )));
    }
    lambda
        .iter()
        .zip(probs)
        .enumerate()
        .map(|(xi, (row, &pi))| {
            if !(pi > 0.0) {
                return Err(EquilibriumError::Domain(format!(
                    "scenario {xi} has probability {pi}; prices are undefined"
                )));
            }
            Ok(row.iter().map(|l| l / pi).collect())
        })
        .collect()
}

fn infeasible(constraint: &'static str, scenario: usize, violation: f64) -> EquilibriumError {
    EquilibriumError::Infeasible {
        constraint,
        scenario,
        violation,
    }
}

/// Checks every constraint of the convex program at `point`, with violations
/// measured relative to the scenario's demand.
fn check_feasible(point: &PrimalPoint, problem: &EquilibriumProblem) -> Result<(), EquilibriumError> {
    let net = &problem.network;
    let trips = &problem.trips;
    let k = problem.location_count();
    let n_xi = problem.scenario_count();
    if point.capacity.len() != k
        || point.supply.len() != n_xi
        || point.q.len() != n_xi
        || point.v.len() != n_xi
        || point.supply.iter().any(|g| g.len() != k)
        || point.q.iter().any(|q| q.len() != trips.triple_count())
        || point.v.iter().any(|v| v.len() != net.link_count())
    {
        return Err(EquilibriumError::Domain("primal point dimensions do not match the problem".into()));
    }
    let demand = problem.service_demand();
    let trip_total = problem.trips.total_demand();
    for (xi, theta) in problem.scenarios.thetas().enumerate() {
        let scale = demand[xi].max(1.0);
        let (g, q, v) = (&point.supply[xi], &point.q[xi], &point.v[xi]);
        let most_negative = point
            .capacity
            .iter()
            .chain(g)
            .chain(q)
            .chain(v)
            .fold(0.0f64, |m, &x| m.min(x));
        if most_negative < -FEASIBILITY_TOL * scale {
            return Err(infeasible("nonnegativity", xi, -most_negative / scale));
        }
        for j in 0..k {
            let over = g[j] - point.capacity[j];
            if over > FEASIBILITY_TOL * scale {
                return Err(infeasible("capacity (g <= c)", xi, over / scale));
            }
        }
        let served = trips.service_by_location(q, k);
        for j in 0..k {
            let r = (g[j] - served[j]).abs();
            if r > FEASIBILITY_TOL * scale {
                return Err(infeasible("market clearing (g = sum e q)", xi, r / scale));
            }
        }
        let pair_scale = (theta * trip_total).max(1.0);
        for (i, pair) in trips.pairs().iter().enumerate() {
            let sum: f64 = q[trips.pair_range(i)].iter().sum();
            let r = (sum - theta * pair.demand).abs();
            if r > FEASIBILITY_TOL * pair_scale {
                return Err(infeasible("demand (sum_k q = theta d)", xi, r / pair_scale));
            }
        }
        let mut balance = net.incidence_product(v);
        for (t, &x) in trips.triples().iter().zip(q) {
            balance[t.origin] -= x;
            balance[t.destination] += x;
        }
        let worst = balance.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if worst > FEASIBILITY_TOL * pair_scale {
            return Err(infeasible("flow conservation", xi, worst / pair_scale));
        }
    }
    Ok(())
}

fn entropy_block(q: &[f64], params: &UtilityParams, trips: &TripTable) -> f64 {
    trips
        .triples()
        .iter()
        .zip(q)
        .map(|(t, &x)| {
            if x > 0.0 {
                x * (x.ln() - 1.0 - params.beta0[t.location])
            } else {
                0.0
            }
        })
        .sum()
}

/// Objective of the convex program in money units:
/// `sum phi_c(c) + E[sum phi_g(g) + (beta1/beta2) sum int t + (1/beta2) sum q (ln q - 1 - beta0)]`.
///
/// With `beta2 = 0` the traveler block cannot be expressed in money; since
/// flows then do not depend on prices it is a constant and is left out.
pub fn combined_objective(point: &PrimalPoint, problem: &EquilibriumProblem) -> Result<f64, EquilibriumError> {
    check_feasible(point, problem)?;
    let params = &problem.params;
    let mut total: f64 = problem
        .costs
        .iter()
        .zip(&point.capacity)
        .map(|(c, &x)| c.capital.cost(x))
        .sum();
    for (xi, pi) in problem.scenarios.probs().enumerate() {
        let mut s: f64 = problem
            .costs
            .iter()
            .zip(&point.supply[xi])
            .map(|(c, &g)| c.operating.cost(g))
            .sum();
        if params.beta2 > 0.0 {
            let travel: f64 = problem
                .network
                .links()
                .iter()
                .zip(&point.v[xi])
                .map(|(l, &x)| l.time_integral(x))
                .sum();
            s += (params.beta1 * travel + entropy_block(&point.q[xi], params, &problem.trips)) / params.beta2;
        }
        total += pi * s;
    }
    Ok(total)
}

/// Investor and traveler responses to one price field.
#[derive(Debug, Clone)]
pub struct PriceResponse {
    pub investor: InvestorSolution,
    pub gcda: Vec<GcdaSolution>,
    pub excess: Vec<Vec<f64>>,
    /// Lagrangian dual value, using the assignment lower bounds so that it
    /// never exceeds the true dual function.
    pub dual_value: f64,
}

fn investor_response(
    problem: &EquilibriumProblem,
    rho: &[Vec<f64>],
    fixed: Option<&[f64]>,
) -> Result<InvestorSolution, EquilibriumError> {
    let probs: Vec<f64> = problem.scenarios.probs().collect();
    match fixed {
        None => Ok(solve_investor(rho, &probs, &problem.costs)?),
        Some(cap) => {
            let supply: Vec<Vec<f64>> = rho
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&problem.costs)
                        .zip(cap)
                        .map(|((&r, cost), &c)| optimal_supply(r, &cost.operating, c))
                        .collect()
                })
                .collect();
            let mut sol = InvestorSolution {
                capacity: cap.to_vec(),
                supply,
                profit: 0.0,
            };
            sol.profit = investor_objective(&sol, rho, &probs, &problem.costs)?;
            Ok(sol)
        }
    }
}

/// Evaluates both sides of the market at `rho`.
pub(crate) fn respond(
    problem: &EquilibriumProblem,
    rho: &[Vec<f64>],
    fixed: Option<&[f64]>,
    gcda_tol: f64,
    warm: Option<&[GcdaSolution]>,
) -> Result<PriceResponse, EquilibriumError> {
    let investor = investor_response(problem, rho, fixed)?;
    let thetas: Vec<f64> = problem.scenarios.thetas().collect();
    let gcda: Vec<GcdaSolution> = (0..thetas.len())
        .into_par_iter()
        .map(|xi| {
            let prob = GcdaProblem::new(
                &problem.network,
                &problem.trips,
                &problem.params,
                &rho[xi],
                thetas[xi],
            )?;
            let opts = GcdaOptions {
                tol: gcda_tol,
                warm_start: warm.map(|w| (w[xi].q.clone(), w[xi].v.clone())),
                ..GcdaOptions::default()
            };
            solve_gcda_with(&prob, &opts)
        })
        .collect::<Result<_, GcdaError>>()?;
    let excess = excess_supply(&investor, &gcda, &problem.trips)?;
    let dual_value = dual_from_parts(problem, rho, &investor, &gcda);
    Ok(PriceResponse {
        investor,
        gcda,
        excess,
        dual_value,
    })
}

fn dual_from_parts(
    problem: &EquilibriumProblem,
    rho: &[Vec<f64>],
    investor: &InvestorSolution,
    gcda: &[GcdaSolution],
) -> f64 {
    let params = &problem.params;
    let k = problem.location_count();
    let mut value = -investor.profit;
    for ((pi, sol), prices) in problem.scenarios.probs().zip(gcda).zip(rho) {
        let block = if params.beta2 > 0.0 {
            params.beta1 / params.beta2 * sol.lower_bound
        } else {
            let served = problem.trips.service_by_location(&sol.q, k);
            served.iter().zip(prices).map(|(d, r)| d * r).sum()
        };
        value += pi * block;
    }
    value
}

/// Lagrangian dual value at `prices`, re-solving both sides.
pub fn dual_value(
    problem: &EquilibriumProblem,
    prices: &PriceField,
    fixed: Option<&[f64]>,
    gcda_tol: f64,
) -> Result<PriceResponse, EquilibriumError> {
    respond(problem, &prices.rho, fixed, gcda_tol, None)
}

fn relative_gap(primal: f64, dual: f64) -> f64 {
    (primal - dual) / dual.abs().max(1.0)
}

/// `(primal - dual) / max(1, |dual|)`, with the primal value taken at the
/// solution's demand-side point and the dual value re-solved at `prices`.
pub fn duality_gap(
    solution: &EquilibriumSolution,
    prices: &PriceField,
    problem: &EquilibriumProblem,
) -> Result<f64, EquilibriumError> {
    let primal = combined_objective(&solution.primal_point(problem), problem)?;
    let dual = dual_value(problem, prices, solution.fixed_capacity.as_deref(), 1e-11)?;
    Ok(relative_gap(primal, dual.dual_value))
}

fn market_residual(problem: &EquilibriumProblem, excess: &[Vec<f64>]) -> f64 {
    problem
        .service_demand()
        .iter()
        .zip(excess)
        .map(|(q, e)| e.iter().fold(0.0f64, |m, x| m.max(x.abs())) / q.max(1.0))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    /// Largest difference between stored and re-solved capacities and
    /// supplies, relative to the largest capacity.
    pub investor_residual: f64,
    pub wardrop: Vec<WardropReport>,
    pub market_residual: f64,
    pub duality_gap: f64,
    pub tol: f64,
    pub passed: bool,
}

impl EquilibriumReport {
    pub fn failed_checks(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.investor_residual <= self.tol) {
            out.push("investor optimality".to_string());
        }
        for (xi, w) in self.wardrop.iter().enumerate() {
            for c in w.failed_checks() {
                out.push(format!("scenario {}: {c}", xi + 1));
            }
        }
        if !(self.market_residual <= self.tol) {
            out.push("market clearing".to_string());
        }
        if !(self.duality_gap <= self.tol) {
            out.push("duality gap".to_string());
        }
        out
    }
}

/// Re-derives every equilibrium condition from the stored solution.
pub fn verify_equilibrium(
    solution: &EquilibriumSolution,
    problem: &EquilibriumProblem,
    tol: f64,
) -> Result<EquilibriumReport, EquilibriumError> {
    let n_xi = problem.scenario_count();
    let k = problem.location_count();
    if solution.gcda.len() != n_xi
        || solution.prices.rho.len() != n_xi
        || solution.prices.rho.iter().any(|r| r.len() != k)
        || solution.investor.capacity.len() != k
        || solution.investor.supply.len() != n_xi
    {
        return Err(EquilibriumError::Domain("solution does not match the problem dimensions".into()));
    }
    let rho = &solution.prices.rho;
    let fresh = investor_response(problem, rho, solution.fixed_capacity.as_deref())?;
    let scale = fresh
        .capacity
        .iter()
        .chain(&solution.investor.capacity)
        .fold(1.0f64, |m, &c| m.max(c.abs()));
    let mut investor_residual: f64 = 0.0;
    for (a, b) in fresh.capacity.iter().zip(&solution.investor.capacity) {
        investor_residual = investor_residual.max((a - b).abs() / scale);
    }
    for (ga, gb) in fresh.supply.iter().zip(&solution.investor.supply) {
        for (a, b) in ga.iter().zip(gb) {
            investor_residual = investor_residual.max((a - b).abs() / scale);
        }
    }

    let wardrop = solution
        .gcda
        .iter()
        .zip(rho)
        .map(|(sol, prices)| {
            verify_wardrop_logit(&problem.network, &problem.trips, &problem.params, prices, sol, tol)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let excess = excess_supply(&solution.investor, &solution.gcda, &problem.trips)?;
    let market_residual = market_residual(problem, &excess);
    let duality_gap = match duality_gap(solution, &solution.prices, problem) {
        Ok(g) => g,
        Err(EquilibriumError::Infeasible { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let mut report = EquilibriumReport {
        investor_residual,
        wardrop,
        market_residual,
        duality_gap,
        tol,
        passed: false,
    };
    report.passed = report.failed_checks().is_empty();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn price_recovery_examples() {
        assert_eq!(recover_prices(&[vec![0.0]], &[1.0]).unwrap(), vec![vec![0.0]]);
        let probs = vec![0.05; 20];
        let lambda = vec![vec![17.0]; 20];
        for row in recover_prices(&lambda, &probs).unwrap() {
            assert_relative_eq!(row[0], 340.0, max_relative = 1e-14);
        }
        assert!(recover_prices(&[vec![1.0]], &[0.0]).is_err());
        let probs = [0.3, 0.7];
        let field = PriceField::from_rho(vec![vec![123.4, 0.5], vec![77.0, 1e5]], &probs);
        let back = recover_prices(&field.lambda, &probs).unwrap();
        for (r, b) in field.rho.iter().flatten().zip(back.iter().flatten()) {
            assert_relative_eq!(*r, *b, max_relative = 1e-15);
        }
    }

    #[test]
    fn dual_step_contract() {
        let probs = [1.0];
        let p = PriceField::from_rho(vec![vec![100.0, 5.0, 0.0]], &probs);
        let same = dual_step(&p, &[vec![0.0, 0.0, 0.0]], 0.5, &probs);
        assert_eq!(same, p);
        let next = dual_step(&p, &[vec![10.0, 20.0, 3.0]], 0.5, &probs);
        assert_eq!(next.rho[0][0], 95.0);
        assert_eq!(next.rho[0][1], 0.0);
        assert_eq!(next.rho[0][2], 0.0);
        assert_eq!(next.lambda, next.rho);
    }
}

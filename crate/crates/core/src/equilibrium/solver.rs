use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    market_residual, primal_point, relative_gap, respond, combined_objective, EquilibriumError,
    EquilibriumProblem, EquilibriumSolution, PriceField, PriceResponse, ResidualReport,
};
use crate::gcda::verify_wardrop_logit;

/// Price update rule of the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Projected step `rho <- max(0, rho - eta * excess)`, halving `eta` when
    /// the residual has not improved over five iterations.
    Gradient,
    /// Damped semi-smooth Newton on the excess-supply map, with the demand
    /// Jacobian taken at fixed travel times. Falls back to a gradient step
    /// when no damped step reduces the residual.
    Newton,
}

#[derive(Debug, Clone)]
pub struct EquilibriumOptions {
    /// Target for the largest market residual, relative to total demand.
    pub tol_mc: f64,
    /// Target for the relative duality gap.
    pub gap_tol: f64,
    pub max_outer: usize,
    pub step_rule: StepRule,
    /// Starting price at every active location.
    pub initial_price: Option<f64>,
    /// Starting prices `[scenario][location]`; overrides `initial_price`.
    pub initial_prices: Option<Vec<Vec<f64>>>,
    /// Hold capacities fixed and clear the operational markets only.
    pub fixed_capacity: Option<Vec<f64>>,
    /// Lower limit of the assignment tolerance, which otherwise follows the
    /// market residual.
    pub gcda_tol_floor: f64,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions {
            tol_mc: 1e-4,
            gap_tol: 1e-4,
            max_outer: 200,
            step_rule: StepRule::Newton,
            initial_price: None,
            initial_prices: None,
            fixed_capacity: None,
            gcda_tol_floor: 1e-8,
        }
    }
}

pub fn solve_equilibrium(
    problem: &EquilibriumProblem,
    tol_mc: f64,
    max_outer: usize,
    step_rule: StepRule,
) -> Result<EquilibriumSolution, EquilibriumError> {
    solve_equilibrium_with(
        problem,
        &EquilibriumOptions {
            tol_mc,
            max_outer,
            step_rule,
            ..EquilibriumOptions::default()
        },
    )
}

/// Marginal cost of serving an even share of the mean demand, a neutral
/// starting price.
fn default_price(problem: &EquilibriumProblem, active: &[bool]) -> Vec<f64> {
    let demand = problem.service_demand();
    let mean = demand.iter().sum::<f64>() / demand.len() as f64;
    let n_active = active.iter().filter(|a| **a).count().max(1);
    let share = mean / n_active as f64;
    problem
        .costs
        .iter()
        .zip(active)
        .map(|(c, &a)| {
            if a {
                c.operating.marginal(share) + c.capital.marginal(share)
            } else {
                0.0
            }
        })
        .collect()
}

struct Iterate {
    rho: Vec<Vec<f64>>,
    resp: PriceResponse,
    residual: f64,
    merit: f64,
}

fn merit(problem: &EquilibriumProblem, resp: &PriceResponse, active: &[bool]) -> f64 {
    problem
        .service_demand()
        .iter()
        .zip(&resp.excess)
        .map(|(q, e)| {
            e.iter()
                .zip(active)
                .filter(|(_, a)| **a)
                .map(|(x, _)| (x / q.max(1.0)).powi(2))
                .sum::<f64>()
        })
        .sum()
}

fn evaluate(
    problem: &EquilibriumProblem,
    rho: Vec<Vec<f64>>,
    fixed: Option<&[f64]>,
    gcda_tol: f64,
    warm: Option<&PriceResponse>,
    active: &[bool],
) -> Result<Iterate, EquilibriumError> {
    let resp = respond(problem, &rho, fixed, gcda_tol, warm.map(|w| w.gcda.as_slice()))?;
    let residual = market_residual(problem, &resp.excess);
    let merit = merit(problem, &resp, active);
    Ok(Iterate {
        rho,
        resp,
        residual,
        merit,
    })
}

/// Outer price loop. Returns the best iterate with `converged = false` when
/// `max_outer` is reached.
pub fn solve_equilibrium_with(
    problem: &EquilibriumProblem,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumSolution, EquilibriumError> {
    if !(opts.tol_mc > 0.0 && opts.gap_tol > 0.0) {
        return Err(EquilibriumError::Domain("tolerances must be positive".into()));
    }
    let k = problem.location_count();
    let n_xi = problem.scenario_count();
    let probs: Vec<f64> = problem.scenarios.probs().collect();
    let demand = problem.service_demand();
    let active = problem.active_locations();
    let fixed = opts.fixed_capacity.as_deref();

    if let Some(cap) = fixed {
        if cap.len() != k || cap.iter().any(|c| !(*c >= 0.0)) {
            return Err(EquilibriumError::Domain("fixed capacity must be nonnegative per location".into()));
        }
        // Demand is inelastic in total, so it must fit into the capacity.
        let total: f64 = cap.iter().sum();
        for (xi, q) in demand.iter().enumerate() {
            if *q > total * (1.0 + 1e-12) {
                return Err(EquilibriumError::Infeasible {
                    constraint: "capacity (g <= c)",
                    scenario: xi,
                    violation: (q - total) / q,
                });
            }
        }
    }

    let start: Vec<Vec<f64>> = match (&opts.initial_prices, opts.initial_price) {
        (Some(rho), _) => {
            if rho.len() != n_xi || rho.iter().any(|r| r.len() != k) {
                return Err(EquilibriumError::Domain("initial prices have the wrong shape".into()));
            }
            rho.clone()
        }
        (None, Some(p)) => vec![active.iter().map(|&a| if a { p } else { 0.0 }).collect(); n_xi],
        (None, None) => vec![default_price(problem, &active); n_xi],
    };
    let start: Vec<Vec<f64>> = start
        .into_iter()
        .map(|row| row.into_iter().zip(&active).map(|(r, &a)| if a { r.max(0.0) } else { 0.0 }).collect())
        .collect();

    let mut gcda_tol = 1e-4f64.max(opts.gcda_tol_floor);
    let mut current = evaluate(problem, start, fixed, gcda_tol, None, &active)?;

    let mean_cost: f64 = problem
        .costs
        .iter()
        .map(|c| c.operating.b + c.capital.marginal(0.0))
        .sum::<f64>()
        / k.max(1) as f64;
    let mean_demand = demand.iter().sum::<f64>() / n_xi as f64;
    let mut eta = 0.05 * mean_cost.max(1.0) / mean_demand.max(1.0);
    let mut damping = 1.0f64;
    let mut radius = current.rho.iter().flatten().fold(mean_cost, |m, r| m.max(*r)).max(1.0);
    let mut residual_log: Vec<f64> = Vec::new();
    let mut bound_history = Vec::new();
    let mut best: Option<(f64, Iterate, f64, f64)> = None;
    let mut converged = false;
    let mut outer = 0;

    loop {
        outer += 1;
        let primal = match combined_objective(&primal_point(problem, &current.resp.gcda, fixed), problem) {
            Ok(p) => p,
            Err(EquilibriumError::Infeasible { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let dual = current.resp.dual_value;
        let gap = relative_gap(primal, dual);
        bound_history.push((primal, dual));
        residual_log.push(current.residual);
        log::debug!(
            "outer {outer}: residual {:.3e}, gap {:.3e}, gcda tol {:.1e}",
            current.residual,
            gap,
            gcda_tol
        );

        if current.residual <= opts.tol_mc && gap <= opts.gap_tol {
            converged = true;
            best = Some((current.residual, current, primal, dual));
            break;
        }
        let better = match &best {
            None => true,
            Some((r, ..)) => current.residual < *r,
        };
        if outer >= opts.max_outer {
            if better {
                best = Some((current.residual, current, primal, dual));
            }
            break;
        }
        // Keep the best iterate; the next one is derived from `current`.
        let next_tol = opts.gcda_tol_floor.max(0.01 * current.residual).min(1e-4);
        let next = match opts.step_rule {
            StepRule::Gradient => {
                if residual_log.len() > 5 && current.residual >= residual_log[residual_log.len() - 6] {
                    eta *= 0.5;
                    log::info!("residual stalled over five iterations, step halved to {eta:.3e}");
                    residual_log.clear();
                }
                let rho = gradient_prices(&current, eta, &active);
                evaluate(problem, rho, fixed, next_tol, Some(&current.resp), &active)?
            }
            StepRule::Newton => {
                newton_step(problem, &current, fixed, next_tol, &active, &mut damping, &mut radius, eta)?
            }
        };
        gcda_tol = next_tol;
        if better {
            best = Some((current.residual, current, primal, dual));
        }
        current = next;
    }

    let (_, it, primal, dual) = best.expect("at least one iterate");
    let mut wardrop: f64 = 0.0;
    for (sol, prices) in it.resp.gcda.iter().zip(&it.rho) {
        let report = verify_wardrop_logit(&problem.network, &problem.trips, &problem.params, prices, sol, 1.0)?;
        wardrop = wardrop.max(report.wardrop_gap);
    }
    let residuals = ResidualReport {
        max_market_residual: it.residual,
        duality_gap: relative_gap(primal, dual),
        wardrop_gap: wardrop,
        primal_objective: primal,
        dual_value: dual,
        iterations: outer,
        converged,
    };
    if !converged {
        log::warn!(
            "equilibrium not converged after {outer} iterations: residual {:.3e}, gap {:.3e}",
            residuals.max_market_residual,
            residuals.duality_gap
        );
    }
    Ok(EquilibriumSolution {
        investor: it.resp.investor,
        gcda: it.resp.gcda,
        prices: PriceField::from_rho(it.rho, &probs),
        residuals,
        fixed_capacity: opts.fixed_capacity.clone(),
        bound_history,
    })
}

fn gradient_prices(current: &Iterate, eta: f64, active: &[bool]) -> Vec<Vec<f64>> {
    current
        .rho
        .iter()
        .zip(&current.resp.excess)
        .map(|(row, e)| {
            row.iter()
                .zip(e)
                .zip(active)
                .map(|((r, x), &a)| if a { (r - eta * x).max(0.0) } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Damped step along the regularized Newton direction, capped at `radius`
/// per price. A trial is taken when it lowers the squared residual or
/// raises the dual value by a sufficient fraction of the predicted ascent.
/// The dual test matters where capacity binds in several scenarios: there
/// the excess map is flat along probability-weighted price shifts between
/// scenarios, while the dual still increases along them.
#[allow(clippy::too_many_arguments)]
fn newton_step(
    problem: &EquilibriumProblem,
    current: &Iterate,
    fixed: Option<&[f64]>,
    gcda_tol: f64,
    active: &[bool],
    damping: &mut f64,
    radius: &mut f64,
    eta: f64,
) -> Result<Iterate, EquilibriumError> {
    let index: Vec<(usize, usize)> = (0..problem.scenario_count())
        .flat_map(|xi| (0..problem.location_count()).filter(|&k| active[k]).map(move |k| (xi, k)))
        .collect();
    let probs: Vec<f64> = problem.scenarios.probs().collect();
    if let Some(mut dir) = newton_direction(problem, current, fixed, &index) {
        let longest = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let capped = longest > *radius;
        if capped {
            let scale = *radius / longest;
            dir.iter_mut().for_each(|d| *d *= scale);
        }
        // Ascent of the dual predicted by its gradient -pi * excess.
        let ascent: f64 = index
            .iter()
            .zip(&dir)
            .map(|(&(xi, k), d)| -probs[xi] * current.resp.excess[xi][k] * d)
            .sum();
        let mut t = *damping;
        for _ in 0..12 {
            let mut rho = current.rho.clone();
            for (i, &(xi, k)) in index.iter().enumerate() {
                rho[xi][k] = (current.rho[xi][k] + t * dir[i]).max(0.0);
            }
            let trial = evaluate(problem, rho, fixed, gcda_tol, Some(&current.resp), active)?;
            let merit_ok = trial.merit < current.merit * (1.0 - 1e-4 * t);
            let dual_ok = ascent > 0.0
                && trial.resp.dual_value >= current.resp.dual_value + 1e-4 * t * ascent
                && trial.resp.dual_value > current.resp.dual_value;
            if merit_ok || dual_ok {
                if t >= 1.0 && capped {
                    *radius *= 2.0;
                }
                *damping = (2.0 * t).min(1.0);
                return Ok(trial);
            }
            t *= 0.5;
        }
        *radius *= 0.25;
        log::info!("no damped Newton step made progress; taking a gradient step");
    }
    *damping = 1.0;
    let rho = gradient_prices(current, eta, active);
    evaluate(problem, rho, fixed, gcda_tol, Some(&current.resp), active)
}

/// Solves `J d = -excess` over the active (scenario, location) entries.
fn newton_direction(
    problem: &EquilibriumProblem,
    current: &Iterate,
    fixed: Option<&[f64]>,
    index: &[(usize, usize)],
) -> Option<Vec<f64>> {
    let n = index.len();
    if n == 0 {
        return None;
    }
    let k_count = problem.location_count();
    let mut pos = vec![usize::MAX; problem.scenario_count() * k_count];
    for (i, &(xi, k)) in index.iter().enumerate() {
        pos[xi * k_count + k] = i;
    }
    let at = |xi: usize, k: usize| pos[xi * k_count + k];
    let mut jac = DMatrix::<f64>::zeros(n, n);
    let probs: Vec<f64> = problem.scenarios.probs().collect();
    let inv = &current.resp.investor;

    // Supply side: dg/drho.
    for k in 0..k_count {
        if at(0, k) == usize::MAX {
            continue;
        }
        let cost = &problem.costs[k];
        let op = &cost.operating;
        let c = inv.capacity[k];
        let interior = if op.a > 0.0 { 1.0 / (2.0 * op.a) } else { 0.0 };
        match fixed {
            Some(cap) => {
                for xi in 0..probs.len() {
                    let g = inv.supply[xi][k];
                    if g < cap[k] * (1.0 - 1e-12) || cap[k] == 0.0 {
                        jac[(at(xi, k), at(xi, k))] += interior;
                    }
                }
            }
            None => {
                let binding: Vec<usize> = if c <= 0.0 {
                    (0..probs.len()).collect()
                } else {
                    (0..probs.len())
                        .filter(|&xi| inv.supply[xi][k] >= c * (1.0 - 1e-12))
                        .collect()
                };
                for xi in 0..probs.len() {
                    let g = inv.supply[xi][k];
                    if c > 0.0 && g > 0.0 && g < c * (1.0 - 1e-12) {
                        jac[(at(xi, k), at(xi, k))] += interior;
                    }
                }
                let mass: f64 = binding.iter().map(|&xi| probs[xi]).sum();
                let denom = 2.0 * op.a * mass + cost.capital.curvature(c);
                if denom > 0.0 {
                    for &a in &binding {
                        for &b in &binding {
                            jac[(at(a, k), at(b, k))] += probs[b] / denom;
                        }
                    }
                }
            }
        }
    }

    // Demand side: -dD/drho at fixed leg times.
    let trips = &problem.trips;
    let beta2 = problem.params.beta2;
    if beta2 > 0.0 {
        for (xi, theta) in problem.scenarios.thetas().enumerate() {
            let q = &current.resp.gcda[xi].q;
            for (i, pair) in trips.pairs().iter().enumerate() {
                let total = theta * pair.demand;
                if total <= 0.0 {
                    continue;
                }
                let e2 = pair.service * pair.service;
                let range = trips.pair_range(i);
                for t1 in range.clone() {
                    let k = trips.triples()[t1].location;
                    if at(xi, k) == usize::MAX {
                        continue;
                    }
                    for t2 in range.clone() {
                        let j = trips.triples()[t2].location;
                        if at(xi, j) == usize::MAX {
                            continue;
                        }
                        let delta = if k == j { 1.0 } else { 0.0 };
                        jac[(at(xi, k), at(xi, j))] += beta2 * e2 * q[t1] * (delta - q[t2] / total);
                    }
                }
            }
        }
    }

    // Row scaling by the probabilities gives the symmetric negative Hessian
    // of the dual.
    for (i, &(xi, _)) in index.iter().enumerate() {
        for j in 0..n {
            jac[(i, j)] *= probs[xi];
        }
    }
    let rhs = DVector::from_iterator(
        n,
        index.iter().map(|&(xi, k)| -probs[xi] * current.resp.excess[xi][k]),
    );
    let scale = (0..n).map(|i| jac[(i, i)].abs()).fold(0.0, f64::max).max(1e-12);
    let mut mu = 1e-10 * scale;
    for _ in 0..6 {
        let mut m = jac.clone();
        for i in 0..n {
            m[(i, i)] += mu;
        }
        if let Some(sol) = m.lu().solve(&rhs) {
            if sol.iter().all(|x| x.is_finite()) {
                return Some(sol.iter().copied().collect());
            }
        }
        mu *= 100.0;
    }
    None
}

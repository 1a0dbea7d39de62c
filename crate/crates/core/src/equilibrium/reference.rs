//! Independent oracle: the whole convex program handed to a conic
//! interior-point solver in its link-based form, with per-triple leg flows,
//! node conservation, exponential cones for the entropy and power cones for
//! the BPR integrals. Prices are read off the market-clearing multipliers.

#![allow(non_snake_case)]

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use super::{
    excess_supply, market_residual, EquilibriumError, EquilibriumProblem, EquilibriumSolution,
    PriceField, ResidualReport,
};
use crate::gcda::{gcda_objective, GcdaSolution};
use crate::investor::{investor_objective, CapitalCost, InvestorSolution};
use crate::network::{leg_times, TimeField};

/// Largest instance the oracle accepts.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceLimits {
    pub locations: usize,
    pub scenarios: usize,
    pub nodes: usize,
}

impl Default for ReferenceLimits {
    fn default() -> Self {
        ReferenceLimits {
            locations: 3,
            scenarios: 2,
            nodes: 6,
        }
    }
}

#[derive(Default)]
struct Builder {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
}

impl Builder {
    fn row(&mut self, entries: &[(usize, f64)], rhs: f64) -> usize {
        let r = self.b.len();
        for &(c, v) in entries {
            if v != 0.0 {
                self.rows.push(r);
                self.cols.push(c);
                self.vals.push(v);
            }
        }
        self.b.push(rhs);
        r
    }
}

pub fn solve_reference(problem: &EquilibriumProblem) -> Result<EquilibriumSolution, EquilibriumError> {
    solve_reference_within(problem, ReferenceLimits::default())
}

pub(crate) fn solve_reference_within(
    problem: &EquilibriumProblem,
    limits: ReferenceLimits,
) -> Result<EquilibriumSolution, EquilibriumError> {
    let net = &problem.network;
    let trips = &problem.trips;
    let params = &problem.params;
    let n_k = problem.location_count();
    let n_xi = problem.scenario_count();
    let n_nodes = net.node_count();
    if n_k > limits.locations || n_xi > limits.scenarios || n_nodes > limits.nodes {
        return Err(EquilibriumError::SizeBound(format!(
            "{n_k} locations, {n_xi} scenarios, {n_nodes} nodes (limits {}, {}, {})",
            limits.locations, limits.scenarios, limits.nodes
        )));
    }
    if !(params.beta2 > 0.0) {
        return Err(EquilibriumError::Domain(
            "the reference formulation needs beta2 > 0".into(),
        ));
    }
    let capital: Vec<_> = problem
        .costs
        .iter()
        .map(|c| match &c.capital {
            CapitalCost::Quadratic(q) => Ok(*q),
            _ => Err(EquilibriumError::Domain(
                "the reference formulation supports quadratic capital costs only".into(),
            )),
        })
        .collect::<Result<_, _>>()?;

    let n_a = net.link_count();
    let n_t = trips.triple_count();
    let probs: Vec<f64> = problem.scenarios.probs().collect();
    let thetas: Vec<f64> = problem.scenarios.thetas().collect();
    let congested: Vec<usize> = (0..n_a).filter(|&a| net.links()[a].alpha > 0.0).collect();

    // Variable layout: c, then per scenario [g, q, h, v, s, legs].
    let c_var = |k: usize| k;
    let per_xi = n_k + 2 * n_t + n_a + congested.len() + 2 * n_t * n_a;
    let base = |xi: usize| n_k + xi * per_xi;
    let g_var = |xi: usize, k: usize| base(xi) + k;
    let q_var = |xi: usize, t: usize| base(xi) + n_k + t;
    let h_var = |xi: usize, t: usize| base(xi) + n_k + n_t + t;
    let v_var = |xi: usize, a: usize| base(xi) + n_k + 2 * n_t + a;
    let s_var = |xi: usize, i: usize| base(xi) + n_k + 2 * n_t + n_a + i;
    let leg_var = |xi: usize, t: usize, second: bool, a: usize| {
        base(xi) + n_k + 2 * n_t + n_a + congested.len() + (2 * t + second as usize) * n_a + a
    };
    let n_var = n_k + n_xi * per_xi;

    let mut P_diag = vec![0.0; n_var];
    let mut cost = vec![0.0; n_var];
    for k in 0..n_k {
        P_diag[c_var(k)] = 2.0 * capital[k].a;
        cost[c_var(k)] = capital[k].b;
    }
    let time_weight = params.beta1 / params.beta2;
    let positive: Vec<bool> = trips
        .triples()
        .iter()
        .map(|t| trips.pairs()[t.pair].demand > 0.0)
        .collect();
    for xi in 0..n_xi {
        let pi = probs[xi];
        for k in 0..n_k {
            let op = &problem.costs[k].operating;
            P_diag[g_var(xi, k)] = 2.0 * pi * op.a;
            cost[g_var(xi, k)] = pi * op.b;
        }
        for (t, trip) in trips.triples().iter().enumerate() {
            cost[q_var(xi, t)] = -pi * (1.0 + params.beta0[trip.location]) / params.beta2;
            if positive[t] {
                cost[h_var(xi, t)] = pi / params.beta2;
            }
        }
        for (a, link) in net.links().iter().enumerate() {
            cost[v_var(xi, a)] = pi * time_weight * link.free_flow_time;
        }
        for (i, &a) in congested.iter().enumerate() {
            let l = &net.links()[a];
            cost[s_var(xi, i)] =
                pi * time_weight * l.free_flow_time * l.alpha * l.capacity / (l.beta as f64 + 1.0);
        }
    }

    let mut A = Builder::default();
    let mut market_rows = vec![vec![0usize; n_k]; n_xi];

    // Equalities.
    for xi in 0..n_xi {
        for (t, trip) in trips.triples().iter().enumerate() {
            for (second, from, to) in [
                (false, trip.origin, trip.facility),
                (true, trip.facility, trip.destination),
            ] {
                // The last node's row is implied by the others.
                for node in 0..n_nodes - 1 {
                    let mut e: Vec<(usize, f64)> = Vec::new();
                    for &a in net.outgoing(node) {
                        e.push((leg_var(xi, t, second, a), 1.0));
                    }
                    for (a, l) in net.links().iter().enumerate() {
                        if l.head == node {
                            e.push((leg_var(xi, t, second, a), -1.0));
                        }
                    }
                    let mut qcoef = 0.0;
                    if node == from {
                        qcoef -= 1.0;
                    }
                    if node == to {
                        qcoef += 1.0;
                    }
                    e.push((q_var(xi, t), qcoef));
                    A.row(&e, 0.0);
                }
            }
        }
        for a in 0..n_a {
            let mut e = vec![(v_var(xi, a), 1.0)];
            for t in 0..n_t {
                e.push((leg_var(xi, t, false, a), -1.0));
                e.push((leg_var(xi, t, true, a), -1.0));
            }
            A.row(&e, 0.0);
        }
        for (i, pair) in trips.pairs().iter().enumerate() {
            let e: Vec<(usize, f64)> = trips.pair_range(i).map(|t| (q_var(xi, t), 1.0)).collect();
            A.row(&e, thetas[xi] * pair.demand);
        }
        for k in 0..n_k {
            let mut e = vec![(g_var(xi, k), 1.0)];
            for (t, trip) in trips.triples().iter().enumerate() {
                if trip.location == k {
                    e.push((q_var(xi, t), -trips.pairs()[trip.pair].service));
                }
            }
            market_rows[xi][k] = A.row(&e, 0.0);
        }
    }
    let n_zero = A.b.len();

    // Nonnegativity and capacity.
    for k in 0..n_k {
        A.row(&[(c_var(k), -1.0)], 0.0);
    }
    for xi in 0..n_xi {
        for k in 0..n_k {
            A.row(&[(g_var(xi, k), -1.0)], 0.0);
            A.row(&[(g_var(xi, k), 1.0), (c_var(k), -1.0)], 0.0);
        }
        for t in 0..n_t {
            if !positive[t] {
                A.row(&[(q_var(xi, t), -1.0)], 0.0);
            }
            for a in 0..n_a {
                A.row(&[(leg_var(xi, t, false, a), -1.0)], 0.0);
                A.row(&[(leg_var(xi, t, true, a), -1.0)], 0.0);
            }
        }
    }
    let n_nonneg = A.b.len() - n_zero;

    let mut cones = vec![SupportedConeT::ZeroConeT(n_zero), SupportedConeT::NonnegativeConeT(n_nonneg)];
    // (-h, q, 1) in the exponential cone  <=>  h >= q ln q.
    for xi in 0..n_xi {
        for t in (0..n_t).filter(|&t| positive[t]) {
            A.row(&[(h_var(xi, t), 1.0)], 0.0);
            A.row(&[(q_var(xi, t), -1.0)], 0.0);
            A.row(&[], 1.0);
            cones.push(SupportedConeT::ExponentialConeT());
        }
    }
    // (s, 1, v / cap) in the power cone  <=>  s >= (v / cap)^(beta + 1).
    for xi in 0..n_xi {
        for (i, &a) in congested.iter().enumerate() {
            let l = &net.links()[a];
            A.row(&[(s_var(xi, i), -1.0)], 0.0);
            A.row(&[], 1.0);
            A.row(&[(v_var(xi, a), -1.0 / l.capacity)], 0.0);
            cones.push(SupportedConeT::PowerConeT(1.0 / (l.beta as f64 + 1.0)));
        }
    }

    let m = A.b.len();
    let Amat = CscMatrix::new_from_triplets(m, n_var, A.rows, A.cols, A.vals);
    let (pi_, pj, pv): (Vec<usize>, Vec<usize>, Vec<f64>) = P_diag
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, &v)| (i, i, v))
        .fold((vec![], vec![], vec![]), |mut acc, (i, j, v)| {
            acc.0.push(i);
            acc.1.push(j);
            acc.2.push(v);
            acc
        });
    let Pmat = CscMatrix::new_from_triplets(n_var, n_var, pi_, pj, pv);
    let settings = DefaultSettings {
        verbose: false,
        max_iter: 400,
        tol_gap_abs: 1e-10,
        tol_gap_rel: 1e-11,
        tol_feas: 1e-10,
        tol_ktratio: 1e-8,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&Pmat, &cost, &Amat, &A.b, &cones, settings);
    solver.solve();
    let sol = &solver.solution;
    if !matches!(sol.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
        return Err(EquilibriumError::Reference(format!("solver status {:?}", sol.status)));
    }
    let x = &sol.x;

    let capacity: Vec<f64> = (0..n_k).map(|k| x[c_var(k)].max(0.0)).collect();
    let supply: Vec<Vec<f64>> = (0..n_xi)
        .map(|xi| (0..n_k).map(|k| x[g_var(xi, k)].clamp(0.0, capacity[k])).collect())
        .collect();
    let rho: Vec<Vec<f64>> = (0..n_xi)
        .map(|xi| (0..n_k).map(|k| (-sol.z[market_rows[xi][k]] / probs[xi]).max(0.0)).collect())
        .collect();

    let mut gcda = Vec::with_capacity(n_xi);
    for xi in 0..n_xi {
        let q: Vec<f64> = (0..n_t).map(|t| x[q_var(xi, t)].max(0.0)).collect();
        let v: Vec<f64> = (0..n_a).map(|a| x[v_var(xi, a)].max(0.0)).collect();
        let tau = leg_times(net, &TimeField::at_flows(net, &v), trips)?;
        let objective = gcda_objective(net, &v, &q, &rho[xi], params, trips)?;
        gcda.push(GcdaSolution {
            q,
            v,
            tau,
            objective,
            lower_bound: objective,
            rel_gap: 0.0,
            iterations: sol.iterations as usize,
            converged: true,
            history: Vec::new(),
            legs: None,
        });
    }
    let mut investor = InvestorSolution {
        capacity,
        supply,
        profit: 0.0,
    };
    investor.profit = investor_objective(&investor, &rho, &probs, &problem.costs)?;
    let excess = excess_supply(&investor, &gcda, trips)?;
    let residuals = ResidualReport {
        max_market_residual: market_residual(problem, &excess),
        duality_gap: ((sol.obj_val - sol.obj_val_dual) / sol.obj_val_dual.abs().max(1.0)).max(0.0),
        wardrop_gap: 0.0,
        primal_objective: sol.obj_val,
        dual_value: sol.obj_val_dual,
        iterations: sol.iterations as usize,
        converged: true,
    };
    Ok(EquilibriumSolution {
        investor,
        gcda,
        prices: PriceField::from_rho(rho, &probs),
        residuals,
        fixed_capacity: None,
        bound_history: Vec::new(),
    })
}

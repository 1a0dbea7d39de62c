//! Combined facility choice and route assignment for one demand scenario.
//!
//! Travelers pick a facility by multinomial logit over
//! `V = beta0[k] - beta1 * tau - beta2 * rho[k] * e` and routes by Wardrop
//! equilibrium. Both are the optimality conditions of one convex program in
//! link flows `v` and facility flows `q`:
//!
//! ```text
//! Z(v, q) = sum_a int_0^{v_a} t_a + (1 / beta1) * sum q (ln q - 1 + beta2 rho e - beta0)
//! ```
//!
//! which is minimized by partial linearization (Evans): the travel-time part
//! is linearized, the entropy part is kept exact, so each subproblem is a
//! logit split followed by an all-or-nothing assignment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{LegTrees, Network, NetworkError, TimeField, TripTable};

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GcdaError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("pair (r={origin}, s={destination}) has demand but no facility with finite utility")]
    Infeasible { origin: usize, destination: usize },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityParams {
    /// Locational attractiveness per location index.
    pub beta0: Vec<f64>,
    /// Disutility per unit travel time.
    pub beta1: f64,
    /// Disutility per unit money.
    pub beta2: f64,
}

impl UtilityParams {
    pub fn new(beta0: Vec<f64>, beta1: f64, beta2: f64) -> Result<Self, GcdaError> {
        if !(beta1 > 0.0 && beta1.is_finite()) {
            return Err(GcdaError::InvalidProblem(format!("beta1 must be positive, got {beta1}")));
        }
        if !(beta2 >= 0.0 && beta2.is_finite()) {
            return Err(GcdaError::InvalidProblem(format!(
                "beta2 must be nonnegative, got {beta2}"
            )));
        }
        if beta0.iter().any(|b| !b.is_finite()) {
            return Err(GcdaError::InvalidProblem("beta0 must be finite".into()));
        }
        Ok(UtilityParams { beta0, beta1, beta2 })
    }

    pub fn uniform(locations: usize, beta0: f64, beta1: f64, beta2: f64) -> Result<Self, GcdaError> {
        Self::new(vec![beta0; locations], beta1, beta2)
    }
}

/// One scenario's assignment problem at fixed facility prices.
#[derive(Debug, Clone, Copy)]
pub struct GcdaProblem<'a> {
    pub network: &'a Network,
    pub trips: &'a TripTable,
    pub params: &'a UtilityParams,
    pub prices: &'a [f64],
    pub demand_scale: f64,
}

impl<'a> GcdaProblem<'a> {
    pub fn new(
        network: &'a Network,
        trips: &'a TripTable,
        params: &'a UtilityParams,
        prices: &'a [f64],
        demand_scale: f64,
    ) -> Result<Self, GcdaError> {
        let problem = GcdaProblem {
            network,
            trips,
            params,
            prices,
            demand_scale,
        };
        problem.validate()?;
        Ok(problem)
    }

    fn validate(&self) -> Result<(), GcdaError> {
        let k = self.network.location_count();
        if self.prices.len() != k || self.params.beta0.len() != k {
            return Err(GcdaError::InvalidProblem(format!(
                "{} prices and {} attractiveness values for {k} locations",
                self.prices.len(),
                self.params.beta0.len()
            )));
        }
        if self.prices.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(GcdaError::InvalidProblem("prices must be finite and nonnegative".into()));
        }
        if !(self.demand_scale > 0.0 && self.demand_scale.is_finite()) {
            return Err(GcdaError::InvalidProblem(format!(
                "demand scale must be positive, got {}",
                self.demand_scale
            )));
        }
        Ok(())
    }

    /// `beta2 * rho[k] * e - beta0[k]` per triple.
    fn shifts(&self) -> Vec<f64> {
        triple_shifts(self.prices, self.params, self.trips)
    }
}

fn triple_shifts(prices: &[f64], params: &UtilityParams, trips: &TripTable) -> Vec<f64> {
    trips
        .triples()
        .iter()
        .map(|t| {
            params.beta2 * prices[t.location] * trips.pairs()[t.pair].service
                - params.beta0[t.location]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcdaSolution {
    /// Facility flows per triple.
    pub q: Vec<f64>,
    /// Link flows.
    pub v: Vec<f64>,
    /// Leg times per triple at `v`.
    pub tau: Vec<f64>,
    pub objective: f64,
    /// Best linearization lower bound on the optimal objective.
    pub lower_bound: f64,
    pub rel_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after initialization and after every step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<f64>,
    /// Per-triple leg link flows `(r -> k, k -> s)`, kept only on request.
    #[serde(skip)]
    pub legs: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

#[derive(Debug, Clone)]
pub struct GcdaOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Feasible `(q, v)` to start from instead of the free-flow point.
    pub warm_start: Option<(Vec<f64>, Vec<f64>)>,
    pub track_legs: bool,
    /// Mix the previous target into the new one so successive directions
    /// are conjugate under the objective's diagonal Hessian. Ignored when
    /// legs are tracked.
    pub conjugate: bool,
}

impl Default for GcdaOptions {
    fn default() -> Self {
        GcdaOptions {
            tol: 1e-8,
            max_iter: 20_000,
            warm_start: None,
            track_legs: false,
            conjugate: true,
        }
    }
}

/// Logit facility split of `theta * d` at leg times `tau`, stabilized with
/// log-sum-exp.
pub fn logit_split(
    tau: &[f64],
    prices: &[f64],
    params: &UtilityParams,
    trips: &TripTable,
    demand_scale: f64,
) -> Result<Vec<f64>, GcdaError> {
    let shifts = triple_shifts(prices, params, trips);
    let mut q = vec![0.0; trips.triple_count()];
    logit_into(tau, &shifts, params.beta1, trips, demand_scale, &mut q)?;
    Ok(q)
}

fn logit_into(
    tau: &[f64],
    shifts: &[f64],
    beta1: f64,
    trips: &TripTable,
    theta: f64,
    q: &mut [f64],
) -> Result<(), GcdaError> {
    for (i, pair) in trips.pairs().iter().enumerate() {
        let range = trips.pair_range(i);
        let total = theta * pair.demand;
        if total == 0.0 {
            q[range].fill(0.0);
            continue;
        }
        let utility = |j: usize| -beta1 * tau[j] - shifts[j];
        let vmax = range
            .clone()
            .map(utility)
            .fold(f64::NEG_INFINITY, f64::max);
        if vmax == f64::NEG_INFINITY || vmax.is_nan() {
            return Err(GcdaError::Infeasible {
                origin: pair.origin + 1,
                destination: pair.destination + 1,
            });
        }
        let mut denom = 0.0;
        for j in range.clone() {
            let w = (utility(j) - vmax).exp();
            q[j] = w;
            denom += w;
        }
        for j in range {
            let p = q[j] / denom;
            q[j] = if utility(j).is_finite() {
                total * p.max(PROB_FLOOR)
            } else {
                0.0
            };
        }
    }
    Ok(())
}

/// Entropy part of the objective, `(1 / beta1) * sum q (ln q - 1 + shift)`.
fn entropy_term(q: &[f64], shifts: &[f64], beta1: f64) -> f64 {
    q.iter()
        .zip(shifts)
        .map(|(&x, &s)| if x > 0.0 { x * (x.ln() - 1.0 + s) } else { 0.0 })
        .sum::<f64>()
        / beta1
}

fn travel_term(network: &Network, v: &[f64]) -> f64 {
    network
        .links()
        .iter()
        .zip(v)
        .map(|(l, &x)| l.time_integral(x))
        .sum()
}

/// Objective value at link flows `v` and facility flows `q`.
pub fn gcda_objective(
    network: &Network,
    v: &[f64],
    q: &[f64],
    prices: &[f64],
    params: &UtilityParams,
    trips: &TripTable,
) -> Result<f64, GcdaError> {
    if v.len() != network.link_count() || q.len() != trips.triple_count() {
        return Err(GcdaError::InvalidProblem("flow vector length mismatch".into()));
    }
    if let Some(&x) = v.iter().chain(q).find(|x| !(**x >= 0.0)) {
        return Err(NetworkError::NegativeFlow(x).into());
    }
    let shifts = triple_shifts(prices, params, trips);
    Ok(travel_term(network, v) + entropy_term(q, &shifts, params.beta1))
}

/// All-or-nothing assignment of `q` to shortest legs at `times`.
pub fn all_or_nothing(
    network: &Network,
    times: &TimeField,
    trips: &TripTable,
    q: &[f64],
) -> Result<Vec<f64>, GcdaError> {
    let trees = LegTrees::build(network, times, trips)?;
    check_reachable(&trees, trips, q)?;
    Ok(trees.assign(network, trips, q))
}

fn check_reachable(trees: &LegTrees, trips: &TripTable, q: &[f64]) -> Result<(), GcdaError> {
    for (t, &flow) in trips.triples().iter().zip(q) {
        if flow > 0.0 && !trees.leg_time(t).is_finite() {
            return Err(NetworkError::UnreachableLeg {
                origin: t.origin + 1,
                destination: t.destination + 1,
                facility: t.facility + 1,
            }
            .into());
        }
    }
    Ok(())
}

/// Directional derivative of the objective along `(y - v, q_aux - q)` at
/// step `alpha`.
fn directional_derivative(
    network: &Network,
    shifts: &[f64],
    beta1: f64,
    dir: &Direction,
    alpha: f64,
) -> f64 {
    let mut d = 0.0;
    for ((link, &v), &dv) in network.links().iter().zip(dir.v).zip(&dir.dv) {
        if dv != 0.0 {
            d += link.time((v + alpha * dv).max(0.0)) * dv;
        }
    }
    let mut e = 0.0;
    for ((&q, &dq), &s) in dir.q.iter().zip(&dir.dq).zip(shifts) {
        if dq != 0.0 {
            let x = (q + alpha * dq).max(PROB_FLOOR);
            e += (x.ln() + s) * dq;
        }
    }
    d + e / beta1
}

struct Direction<'a> {
    v: &'a [f64],
    q: &'a [f64],
    dv: Vec<f64>,
    dq: Vec<f64>,
}

impl<'a> Direction<'a> {
    fn new(v: &'a [f64], q: &'a [f64], y: &[f64], q_aux: &[f64]) -> Self {
        Direction {
            v,
            q,
            dv: y.iter().zip(v).map(|(a, b)| a - b).collect(),
            dq: q_aux.iter().zip(q).map(|(a, b)| a - b).collect(),
        }
    }

    fn is_zero(&self) -> bool {
        self.dv.iter().chain(&self.dq).all(|&x| x == 0.0)
    }
}

fn bisect_step(network: &Network, shifts: &[f64], beta1: f64, dir: &Direction) -> f64 {
    if dir.is_zero() {
        return 0.0;
    }
    if directional_derivative(network, shifts, beta1, dir, 0.0) >= 0.0 {
        return 0.0;
    }
    if directional_derivative(network, shifts, beta1, dir, 1.0) <= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        let d = directional_derivative(network, shifts, beta1, dir, mid);
        if d.abs() <= 1e-10 {
            return mid;
        }
        if d < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact step on the segment from `(v, q)` to `(y, q_aux)`.
pub fn line_search(
    network: &Network,
    v: &[f64],
    q: &[f64],
    y: &[f64],
    q_aux: &[f64],
    prices: &[f64],
    params: &UtilityParams,
    trips: &TripTable,
) -> f64 {
    let shifts = triple_shifts(prices, params, trips);
    let dir = Direction::new(v, q, y, q_aux);
    bisect_step(network, &shifts, params.beta1, &dir)
}

/// Directional derivative of the objective at `alpha` along the segment from
/// `(v, q)` to `(y, q_aux)`.
pub fn segment_derivative(
    network: &Network,
    v: &[f64],
    q: &[f64],
    y: &[f64],
    q_aux: &[f64],
    prices: &[f64],
    params: &UtilityParams,
    trips: &TripTable,
    alpha: f64,
) -> f64 {
    let shifts = triple_shifts(prices, params, trips);
    let dir = Direction::new(v, q, y, q_aux);
    directional_derivative(network, &shifts, params.beta1, &dir, alpha)
}

pub fn solve_gcda(problem: &GcdaProblem, tol: f64, max_iter: usize) -> Result<GcdaSolution, GcdaError> {
    solve_gcda_with(
        problem,
        &GcdaOptions {
            tol,
            max_iter,
            ..GcdaOptions::default()
        },
    )
}

/// Partial-linearization solve. Stops when the relative gap to the best
/// lower bound, the largest logit-share residual and the normalized Wardrop
/// gap are all within `tol`, or after `max_iter` iterations with
/// `converged = false`.
pub fn solve_gcda_with(problem: &GcdaProblem, opts: &GcdaOptions) -> Result<GcdaSolution, GcdaError> {
    problem.validate()?;
    let net = problem.network;
    let trips = problem.trips;
    let beta1 = problem.params.beta1;
    let theta = problem.demand_scale;
    let shifts = problem.shifts();
    let n_links = net.link_count();
    let n_triples = trips.triple_count();

    let mut q = vec![0.0; n_triples];
    let mut v;
    let mut legs: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;

    match &opts.warm_start {
        Some((q0, v0)) if q0.len() == n_triples && v0.len() == n_links && !opts.track_legs => {
            q.copy_from_slice(q0);
            v = v0.clone();
        }
        _ => {
            let free: Vec<f64> = net.links().iter().map(|l| l.free_flow_time).collect();
            let trees = LegTrees::build_unchecked(net, &free, trips);
            let tau = trees.leg_times(trips)?;
            logit_into(&tau, &shifts, beta1, trips, theta, &mut q)?;
            check_reachable(&trees, trips, &q)?;
            v = trees.assign(net, trips, &q);
            if opts.track_legs {
                legs = Some(
                    trips
                        .triples()
                        .iter()
                        .zip(&q)
                        .map(|(t, &x)| trees.leg_flows(net, t, x))
                        .collect(),
                );
            }
        }
    }

    let mut q_aux = vec![0.0; n_triples];
    let mut times = vec![0.0; n_links];
    let mut best_lb = f64::NEG_INFINITY;
    let mut history = vec![travel_term(net, &v) + entropy_term(&q, &shifts, beta1)];
    let mut converged = false;
    let mut iterations = 0;
    let mut rel_gap;
    let mut tau;
    let conjugate = opts.conjugate && !opts.track_legs;
    let mut prev_target: Option<(Vec<f64>, Vec<f64>)> = None;

    loop {
        iterations += 1;
        for ((t, l), &x) in times.iter_mut().zip(net.links()).zip(&v) {
            *t = l.time(x);
        }
        let trees = LegTrees::build_unchecked(net, &times, trips);
        tau = trees.leg_times(trips)?;
        logit_into(&tau, &shifts, beta1, trips, theta, &mut q_aux)?;
        let y = trees.assign(net, trips, &q_aux);

        let f = travel_term(net, &v);
        let z = f + entropy_term(&q, &shifts, beta1);
        let linear: f64 = times
            .iter()
            .zip(y.iter().zip(&v))
            .map(|(t, (a, b))| t * (a - b))
            .sum();
        let lb = f + linear + entropy_term(&q_aux, &shifts, beta1);
        best_lb = best_lb.max(lb);
        rel_gap = relative_gap(z, best_lb);

        let share = max_share_residual(trips, theta, &q, &q_aux);
        let wardrop = wardrop_gap(&times, &v, &q, &tau);
        if rel_gap <= opts.tol && share <= opts.tol && wardrop <= opts.tol {
            converged = true;
            break;
        }
        if iterations > opts.max_iter {
            break;
        }

        let mut target = None;
        if conjugate {
            if let Some((vb, qb)) = &prev_target {
                let mix = conjugate_weight(net, beta1, &v, &q, (vb, qb), (&y, &q_aux));
                if mix > 0.0 {
                    let vt: Vec<f64> = vb.iter().zip(&y).map(|(a, b)| mix * a + (1.0 - mix) * b).collect();
                    let qt: Vec<f64> = qb.iter().zip(&q_aux).map(|(a, b)| mix * a + (1.0 - mix) * b).collect();
                    let d = Direction::new(&v, &q, &vt, &qt);
                    if directional_derivative(net, &shifts, beta1, &d, 0.0) < 0.0 {
                        target = Some((vt, qt));
                    }
                }
            }
        }
        let (ty, tq) = target.unwrap_or_else(|| (y.clone(), q_aux.clone()));
        let mut dir = Direction::new(&v, &q, &ty, &tq);
        let mut alpha = bisect_step(net, &shifts, beta1, &dir);
        if alpha == 0.0 && prev_target.is_some() {
            dir = Direction::new(&v, &q, &y, &q_aux);
            alpha = bisect_step(net, &shifts, beta1, &dir);
            prev_target = None;
        } else if conjugate {
            // A full step lands on the target and leaves nothing to be
            // conjugate to.
            prev_target = if alpha < 1.0 { Some((ty, tq)) } else { None };
        }
        if alpha == 0.0 {
            // No descent left at floating-point resolution.
            log::debug!("gcda stalled at gap {rel_gap:e}, share {share:e}, wardrop {wardrop:e}");
            break;
        }
        if let Some(legs) = legs.as_mut() {
            for ((t, leg), &qa) in trips.triples().iter().zip(legs.iter_mut()).zip(&q_aux) {
                let (ya, yb) = trees.leg_flows(net, t, qa);
                for (x, y) in leg.0.iter_mut().zip(&ya) {
                    *x += alpha * (y - *x);
                }
                for (x, y) in leg.1.iter_mut().zip(&yb) {
                    *x += alpha * (y - *x);
                }
            }
        }
        let (dv, dq) = (dir.dv, dir.dq);
        for (x, d) in v.iter_mut().zip(&dv) {
            *x = (*x + alpha * d).max(0.0);
        }
        for (x, d) in q.iter_mut().zip(&dq) {
            *x += alpha * d;
        }
        renormalize(trips, theta, &mut q);
        history.push(travel_term(net, &v) + entropy_term(&q, &shifts, beta1));
    }

    let objective = travel_term(net, &v) + entropy_term(&q, &shifts, beta1);
    Ok(GcdaSolution {
        q,
        v,
        tau,
        objective,
        lower_bound: best_lb,
        rel_gap,
        iterations,
        converged,
        history,
        legs,
    })
}

/// Weight on the previous target that makes the new direction conjugate to
/// the previous one, clamped to `[0, 0.99]`.
fn conjugate_weight(
    net: &Network,
    beta1: f64,
    v: &[f64],
    q: &[f64],
    prev: (&[f64], &[f64]),
    next: (&[f64], &[f64]),
) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (a, link) in net.links().iter().enumerate() {
        let h = link.time_derivative(v[a]);
        let d_prev = prev.0[a] - v[a];
        num += h * d_prev * (next.0[a] - v[a]);
        den += h * d_prev * (next.0[a] - prev.0[a]);
    }
    for (t, &x) in q.iter().enumerate() {
        if x > 1e-12 {
            let h = 1.0 / (beta1 * x);
            let d_prev = prev.1[t] - x;
            num += h * d_prev * (next.1[t] - x);
            den += h * d_prev * (next.1[t] - prev.1[t]);
        }
    }
    if den == 0.0 || !(num / den).is_finite() {
        return 0.0;
    }
    (num / den).clamp(0.0, 0.99)
}

/// Removes round-off drift so that `sum_k q = theta * d` holds per pair.
fn renormalize(trips: &TripTable, theta: f64, q: &mut [f64]) {
    for (i, pair) in trips.pairs().iter().enumerate() {
        let range = trips.pair_range(i);
        let target = theta * pair.demand;
        let sum: f64 = q[range.clone()].iter().sum();
        if sum > 0.0 && target > 0.0 {
            let scale = target / sum;
            for x in &mut q[range] {
                *x *= scale;
            }
        }
    }
}

fn relative_gap(z: f64, lb: f64) -> f64 {
    let num = z - lb;
    if num <= 0.0 {
        0.0
    } else {
        num / lb.abs().max(f64::MIN_POSITIVE)
    }
}

fn max_share_residual(trips: &TripTable, theta: f64, q: &[f64], q_ref: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, pair) in trips.pairs().iter().enumerate() {
        let total = theta * pair.demand;
        if total <= 0.0 {
            continue;
        }
        for j in trips.pair_range(i) {
            worst = worst.max((q[j] - q_ref[j]).abs() / total);
        }
    }
    worst
}

/// `(sum t v - sum q tau_min) / sum t v`, zero on an empty system.
fn wardrop_gap(times: &[f64], v: &[f64], q: &[f64], tau: &[f64]) -> f64 {
    let tv: f64 = times.iter().zip(v).map(|(t, x)| t * x).sum();
    let qt: f64 = q
        .iter()
        .zip(tau)
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, t)| x * t)
        .sum();
    if tv <= 0.0 {
        return 0.0;
    }
    ((tv - qt) / tv).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WardropReport {
    /// Largest `|tau_recomputed - tau_stored| / tau_recomputed`.
    pub tau_residual: f64,
    /// Largest `|q / sum q - softmax(V)|` over triples.
    pub share_residual: f64,
    /// `(sum t v - sum q tau_min) / sum t v`.
    pub wardrop_gap: f64,
    /// Largest node-balance violation of `v` against `q`, per unit demand.
    pub balance_residual: f64,
    pub tol: f64,
    pub passed: bool,
}

impl WardropReport {
    pub fn failed_checks(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !(self.tau_residual <= self.tol) {
            out.push("leg-time consistency");
        }
        if !(self.share_residual <= self.tol) {
            out.push("logit shares");
        }
        if !(self.wardrop_gap <= self.tol) {
            out.push("wardrop gap");
        }
        if !(self.balance_residual <= self.tol) {
            out.push("flow balance");
        }
        out
    }
}

/// Checks a solution against the route-choice and facility-choice
/// equilibrium conditions from scratch.
pub fn verify_wardrop_logit(
    network: &Network,
    trips: &TripTable,
    params: &UtilityParams,
    prices: &[f64],
    solution: &GcdaSolution,
    tol: f64,
) -> Result<WardropReport, GcdaError> {
    if solution.q.len() != trips.triple_count()
        || solution.v.len() != network.link_count()
        || solution.tau.len() != trips.triple_count()
    {
        return Err(GcdaError::InvalidProblem("solution dimensions do not match the problem".into()));
    }
    if let Some(&x) = solution.v.iter().chain(&solution.q).find(|x| !(**x >= 0.0)) {
        return Err(NetworkError::NegativeFlow(x).into());
    }
    let times = TimeField::at_flows(network, &solution.v);
    let trees = LegTrees::build(network, &times, trips)?;
    let tau = trees.leg_times(trips)?;

    let mut tau_residual: f64 = 0.0;
    for (&fresh, &stored) in tau.iter().zip(&solution.tau) {
        if fresh.is_finite() {
            tau_residual = tau_residual.max((fresh - stored).abs() / fresh.max(f64::MIN_POSITIVE));
        }
    }

    let shifts = triple_shifts(prices, params, trips);
    let mut share_residual: f64 = 0.0;
    let mut reference = vec![0.0; trips.triple_count()];
    logit_into(&tau, &shifts, params.beta1, trips, 1.0, &mut reference)?;
    for (i, pair) in trips.pairs().iter().enumerate() {
        if pair.demand <= 0.0 {
            continue;
        }
        let range = trips.pair_range(i);
        let sum: f64 = solution.q[range.clone()].iter().sum();
        for j in range {
            let share = if sum > 0.0 { solution.q[j] / sum } else { 0.0 };
            share_residual = share_residual.max((share - reference[j] / pair.demand).abs());
        }
    }

    let wardrop = wardrop_gap(&times.link_times, &solution.v, &solution.q, &tau);

    // Net outflow of v must equal the leg sources and sinks implied by q.
    let mut balance = network.incidence_product(&solution.v);
    let mut scale = 0.0;
    for (t, &x) in trips.triples().iter().zip(&solution.q) {
        balance[t.origin] -= x;
        balance[t.facility] += x;
        balance[t.facility] -= x;
        balance[t.destination] += x;
        scale += x;
    }
    let balance_residual = if scale > 0.0 {
        balance.iter().fold(0.0f64, |m, b| m.max(b.abs())) / scale
    } else {
        0.0
    };

    let mut report = WardropReport {
        tau_residual,
        share_residual,
        wardrop_gap: wardrop,
        balance_residual,
        tol,
        passed: false,
    };
    report.passed = report.failed_checks().is_empty();
    Ok(report)
}

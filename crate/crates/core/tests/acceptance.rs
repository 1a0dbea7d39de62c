//! Acceptance run: one `[PASS]` or `[FAIL]` line per criterion.

mod common;

use std::time::{Duration, Instant};

use common::*;
use isfe::equilibrium::*;
use isfe::gcda::{solve_gcda_with, verify_wardrop_logit, GcdaOptions, GcdaProblem};
use isfe::investor::{aggregate_profiles, allocate_capacity, CapitalCost, QuadraticCost};
use isfe::network::{link_time_integral, Link};
use isfe::stochastic::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn tight() -> EquilibriumOptions {
    EquilibriumOptions {
        tol_mc: 1e-9,
        gap_tol: 1e-9,
        ..EquilibriumOptions::default()
    }
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn solve(p: &EquilibriumProblem, opts: &EquilibriumOptions) -> Result<EquilibriumSolution, String> {
    solve_equilibrium_with(p, opts).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    ensure(elapsed < limit, || format!("{detail}; took {elapsed:.2?}, limit {limit:?}"))?;
    Ok(detail)
}

const SMALL: RandomSpec = RandomSpec {
    max_nodes: 6,
    max_locations: 3,
    max_scenarios: 2,
};

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let one = solve(&single_facility(100.0, ScenarioSet::single(1.0)), &tight())?;
    let two = solve(&symmetric_pair(100.0, ScenarioSet::single(1.0)), &tight())?;
    let mut worst: f64 = 0.0;
    for (got, want) in [
        (one.prices.rho[0][0], 340.0),
        (one.investor.capacity[0], 100.0),
        (one.investor.supply[0][0], 100.0),
        (two.prices.rho[0][0], 320.0),
        (two.prices.rho[0][1], 320.0),
        (two.investor.supply[0][0], 50.0),
        (two.investor.supply[0][1], 50.0),
    ] {
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-6, || format!("largest deviation {worst:e}"))?;
    within_time(
        start.elapsed(),
        Duration::from_secs(1),
        format!("rho = {:.9} and {:.9}, largest deviation {worst:.1e}", one.prices.rho[0][0], two.prices.rho[0][0]),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let spec = RandomSpec {
        max_nodes: 10,
        max_locations: 3,
        max_scenarios: 1,
    };
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let p = random_problem(1000 + seed, &spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prices: Vec<f64> = (0..p.location_count()).map(|_| rng.gen_range(100.0..500.0)).collect();
        let theta = p.scenarios.scenarios()[0].theta;
        let g = GcdaProblem::new(&p.network, &p.trips, &p.params, &prices, theta).map_err(|e| e.to_string())?;
        let sol = solve_gcda_with(
            &g,
            &GcdaOptions {
                tol: 1e-8,
                ..GcdaOptions::default()
            },
        )
        .map_err(|e| e.to_string())?;
        ensure(sol.converged, || format!("instance {seed}: gap {:e} after {} iterations", sol.rel_gap, sol.iterations))?;
        let report =
            verify_wardrop_logit(&p.network, &p.trips, &p.params, &prices, &sol, 1e-4).map_err(|e| e.to_string())?;
        ensure(report.passed, || format!("instance {seed}: {:?}", report.failed_checks()))?;
        worst = worst
            .max(report.tau_residual)
            .max(report.share_residual)
            .max(report.wardrop_gap)
            .max(report.balance_residual);
    }
    within_time(
        start.elapsed(),
        Duration::from_secs(30),
        format!("50 instances pass, largest residual {worst:.1e}"),
    )
}

fn toy_suite() -> Vec<EquilibriumProblem> {
    let mut problems = vec![
        single_facility(100.0, ScenarioSet::single(1.0)),
        symmetric_pair(100.0, ScenarioSet::single(1.0)),
    ];
    problems.extend((0..10).map(|s| random_problem(s, &SMALL)));
    problems
}

fn criterion_3() -> Outcome {
    let (mut worst_gap, mut worst_violation): (f64, f64) = (0.0, 0.0);
    for (i, p) in toy_suite().iter().enumerate() {
        let sol = solve(p, &tight())?;
        ensure(sol.residuals.converged, || format!("toy {i} did not converge"))?;
        let gap = duality_gap(&sol, &sol.prices, p).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max(gap).max(sol.residuals.duality_gap);
        let best_primal = sol.bound_history.iter().map(|b| b.0).fold(f64::INFINITY, f64::min);
        for &(_, dual) in &sol.bound_history {
            worst_violation = worst_violation.max((dual - best_primal) / best_primal.abs().max(1.0));
        }
    }
    ensure(worst_gap <= 1e-4, || format!("duality gap {worst_gap:e}"))?;
    ensure(worst_violation <= 1e-9, || format!("weak duality violated by {worst_violation:e}"))?;
    Ok(format!(
        "12 toys, largest gap {worst_gap:.1e}, largest dual excess {:.1e}",
        worst_violation.max(0.0)
    ))
}

fn criterion_4() -> Outcome {
    let mut problems = vec![
        single_facility(100.0, ScenarioSet::single(1.0)),
        symmetric_pair(100.0, ScenarioSet::single(1.0)),
    ];
    problems.extend((20..30).map(|s| random_problem(s, &SMALL)));
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for p in problems.iter().filter(|p| p.strictly_convex()) {
        let run = |start: f64| {
            solve(
                p,
                &EquilibriumOptions {
                    initial_price: Some(start),
                    ..tight()
                },
            )
        };
        let (a, b) = (run(0.0)?, run(500.0)?);
        let q = |s: &EquilibriumSolution| s.gcda.iter().flat_map(|g| g.q.clone()).collect::<Vec<_>>();
        worst = worst
            .max(max_rel_diff(&a.investor.capacity, &b.investor.capacity, 1.0))
            .max(max_rel_diff(&flat(&a.investor.supply), &flat(&b.investor.supply), 1.0))
            .max(max_rel_diff(&q(&a), &q(&b), 1.0))
            .max(max_rel_diff(&flat(&a.prices.rho), &flat(&b.prices.rho), 1.0));
        count += 1;
    }
    ensure(worst <= 1e-4, || format!("starts disagree by {worst:e}"))?;
    Ok(format!("{count} strictly convex toys, largest difference {worst:.1e}"))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let p = random_problem(seed, &SMALL);
        let a = solve(&p, &tight())?;
        let b = solve_reference(&p).map_err(|e| format!("instance {seed}: {e}"))?;
        let q = |s: &EquilibriumSolution| s.gcda.iter().flat_map(|g| g.q.clone()).collect::<Vec<_>>();
        let v = |s: &EquilibriumSolution| s.gcda.iter().flat_map(|g| g.v.clone()).collect::<Vec<_>>();
        let d = max_rel_diff(&flat(&a.prices.rho), &flat(&b.prices.rho), 1.0)
            .max(max_rel_diff(&a.investor.capacity, &b.investor.capacity, 1.0))
            .max(max_rel_diff(&flat(&a.investor.supply), &flat(&b.investor.supply), 1.0))
            .max(max_rel_diff(&q(&a), &q(&b), 1.0))
            .max(max_rel_diff(&v(&a), &v(&b), 1.0));
        ensure(d <= 1e-4, || format!("instance {seed} differs by {d:e}"))?;
        worst = worst.max(d);
    }
    within_time(
        start.elapsed(),
        Duration::from_secs(120),
        format!("20 instances agree, largest difference {worst:.1e}"),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let p = sioux_falls(ScenarioSet::single(1.0));
    let sol = solve(&p, &EquilibriumOptions::default())?;
    let r = &sol.residuals;
    ensure(r.converged, || format!("not converged: {r:?}"))?;
    ensure(r.max_market_residual <= 1e-4, || format!("market residual {:e}", r.max_market_residual))?;
    ensure(r.duality_gap <= 1e-4, || format!("duality gap {:e}", r.duality_gap))?;
    let total: f64 = sol.investor.supply[0].iter().sum();
    ensure((total - 2500.0).abs() <= 1e-4 * 2500.0, || format!("total supply {total}"))?;
    within_time(
        start.elapsed(),
        Duration::from_secs(120),
        format!(
            "residual {:.1e}, gap {:.1e}, total supply {total:.4}",
            r.max_market_residual, r.duality_gap
        ),
    )
}

fn travel_time(p: &EquilibriumProblem, sol: &EquilibriumSolution) -> f64 {
    p.scenarios
        .probs()
        .zip(&sol.gcda)
        .map(|(pi, g)| pi * p.network.links().iter().zip(&g.v).map(|(l, &v)| l.time(v) * v).sum::<f64>())
        .sum()
}

fn dispersion(c: &[f64]) -> f64 {
    let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = c.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let base = sioux_falls(ScenarioSet::single(1.0));
    let mut rows = Vec::new();
    for beta2 in [0.0, 0.06, 0.6] {
        let mut p = base.clone();
        p.params.beta2 = beta2;
        let sol = solve(&p, &EquilibriumOptions::default())?;
        ensure(sol.residuals.converged, || format!("beta2 = {beta2} did not converge"))?;
        rows.push((beta2, travel_time(&p, &sol), dispersion(&sol.investor.capacity)));
    }
    let summary = rows
        .iter()
        .map(|(b, t, d)| format!("beta2 {b}: time {t:.1}, dispersion {d:.1}"))
        .collect::<Vec<_>>()
        .join("; ");
    let time_ok = rows.windows(2).all(|w| w[1].1 >= w[0].1);
    let dispersion_ok = rows.windows(2).all(|w| w[1].2 <= w[0].2);

    let congested = solve(&base, &EquilibriumOptions::default())?;
    let free = EquilibriumProblem {
        network: base.network.without_congestion(),
        ..base.clone()
    };
    let free = solve(&free, &EquilibriumOptions::default())?;
    let total: f64 = congested.investor.capacity.iter().sum();
    let diff = congested
        .investor
        .capacity
        .iter()
        .zip(&free.investor.capacity)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let congestion_ok = diff > 0.01 * total;
    let detail = format!(
        "{summary}; no-congestion capacity difference {diff:.4} vs threshold {:.1}",
        0.01 * total
    );
    ensure(time_ok, || format!("travel time decreased: {detail}"))?;
    ensure(dispersion_ok, || format!("dispersion increased: {detail}"))?;
    ensure(congestion_ok, || format!("congestion barely moves capacity: {detail}"))?;
    within_time(start.elapsed(), Duration::from_secs(600), detail)
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let opts = EquilibriumOptions::default();

    let single = generate_scenarios(1, 1.0, 1.0, 2024).map_err(|e| e.to_string())?;
    let p = sioux_falls(single.clone());
    let case = |p: &EquilibriumProblem, set: &ScenarioSet, mode| solve_case(p, set, mode, &opts).map_err(|e| e.to_string());
    let c1 = case(&p, &single, CaseMode::Deterministic)?;
    let c2 = case(&p, &single, CaseMode::Stochastic)?;
    let c3 = case(&p, &single, CaseMode::WaitAndSee)?;
    let (eval, _) = evaluate_deterministic(&p, &c1, &opts).map_err(|e| e.to_string())?;
    let m = compute_metrics(&eval, &c2, &c3).map_err(|e| e.to_string())?;
    let all = [m.vss_provider, m.vss_user, m.vss_surplus, m.evpi_provider, m.evpi_user, m.evpi_surplus];
    ensure(all.iter().all(|&x| x == 0.0), || format!("degenerate metrics {all:?}"))?;

    let set = generate_scenarios(20, 1.0, 1.2, 2024).map_err(|e| e.to_string())?;
    let p = sioux_falls(set.clone());
    let c1 = case(&p, &set, CaseMode::Deterministic)?;
    let c2 = case(&p, &set, CaseMode::Stochastic)?;
    let c3 = case(&p, &set, CaseMode::WaitAndSee)?;
    let sol = &c2.solutions[0];
    for row in &sol.investor.supply {
        for (k, (&g, &c)) in row.iter().zip(&sol.investor.capacity).enumerate() {
            ensure(g <= c * (1.0 + 1e-9) + 1e-9, || format!("location {}: supply {g} above capacity {c}", k + 1))?;
        }
    }
    let (eval, basis) = evaluate_deterministic(&p, &c1, &opts).map_err(|e| e.to_string())?;
    let m = compute_metrics(&eval, &c2, &c3).map_err(|e| e.to_string())?;
    let pattern = if m.evpi_provider <= 0.0 && m.evpi_user >= 0.0 {
        "matches the expected pattern"
    } else {
        "differs from the expected pattern"
    };
    within_time(
        start.elapsed(),
        Duration::from_secs(900),
        format!(
            "capacity covers all 20 scenarios; degenerate metrics are 0; EVPI provider {:.1}, user {:.1} ({pattern}, not asserted); VSS basis {basis:?}",
            m.evpi_provider, m.evpi_user
        ),
    )
}

fn criterion_9() -> Outcome {
    let profiles = vec![QuadraticCost::new(0.1, 170.0).unwrap(), QuadraticCost::new(1.0, 17.0).unwrap()];
    let agg = aggregate_profiles(&profiles).map_err(|e| e.to_string())?;
    let base = sioux_falls(ScenarioSet::single(1.0));
    let with = |capital: CapitalCost| {
        let mut p = base.clone();
        for c in &mut p.costs {
            c.capital = capital.clone();
        }
        solve(&p, &tight())
    };
    let a = with(CapitalCost::Aggregate(agg))?;
    let b = with(CapitalCost::Investors {
        profiles: profiles.clone(),
    })?;
    let d = a
        .investor
        .capacity
        .iter()
        .zip(&b.investor.capacity)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    ensure(d <= 1e-6, || format!("capacities differ by {d:e}"))?;
    for &c in &a.investor.capacity {
        let split = allocate_capacity(c, &profiles).map_err(|e| e.to_string())?;
        let sum: f64 = split.iter().sum();
        ensure(sum == c, || format!("split {split:?} sums to {sum}, not {c}"))?;
    }
    Ok(format!("largest relative capacity difference {d:.1e}; splits sum exactly"))
}

/// Composite Gauss-Legendre, five points per panel.
fn quadrature(f: impl Fn(f64) -> f64, b: f64, panels: usize) -> f64 {
    const X: [f64; 5] = [0.0, -0.538_469_310_105_683, 0.538_469_310_105_683, -0.906_179_845_938_664, 0.906_179_845_938_664];
    const W: [f64; 5] = [0.568_888_888_888_889, 0.478_628_670_499_366, 0.478_628_670_499_366, 0.236_926_885_056_189, 0.236_926_885_056_189];
    let h = b / panels as f64;
    (0..panels)
        .map(|i| {
            let mid = (i as f64 + 0.5) * h;
            X.iter().zip(&W).map(|(x, w)| w * f(mid + 0.5 * h * x)).sum::<f64>() * 0.5 * h
        })
        .sum()
}

fn criterion_10() -> Outcome {
    // Integral of the travel time against quadrature.
    let mut worst_q: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let link = Link::new(0, 1, rng.gen_range(0.5..20.0), rng.gen_range(10.0..500.0))
            .with_bpr(rng.gen_range(0.0..2.0), rng.gen_range(1..=6));
        let flow = rng.gen_range(0.0..1500.0);
        let exact = link_time_integral(&link, flow).map_err(|e| e.to_string())?;
        let numeric = quadrature(|x| link.time(x), flow, 64);
        worst_q = worst_q.max((exact - numeric).abs() / numeric.abs().max(1.0));
    }
    ensure(worst_q <= 1e-8, || format!("quadrature differs by {worst_q:e}"))?;

    // Dual gradient against central differences, away from equilibrium.
    let mut worst_g: f64 = 0.0;
    for seed in [1, 3, 8, 12] {
        let p = random_problem(seed, &SMALL);
        let probs: Vec<f64> = p.scenarios.probs().collect();
        let sol = solve(&p, &tight())?;
        let rho: Vec<Vec<f64>> = sol.prices.rho.iter().map(|r| r.iter().map(|x| x * 1.03 + 1.0).collect()).collect();
        let at = |rho: &Vec<Vec<f64>>| {
            dual_value(&p, &PriceField::from_rho(rho.clone(), &probs), None, 1e-13).map_err(|e| e.to_string())
        };
        let base = at(&rho)?;
        for xi in 0..p.scenario_count() {
            for k in 0..p.location_count() {
                let h = 1e-3;
                let (mut up, mut down) = (rho.clone(), rho.clone());
                up[xi][k] += h;
                down[xi][k] -= h;
                let fd = (at(&up)?.dual_value - at(&down)?.dual_value) / (2.0 * h);
                let grad = -probs[xi] * base.excess[xi][k];
                worst_g = worst_g.max((fd - grad).abs() / grad.abs().max(1.0));
            }
        }
    }
    ensure(worst_g <= 1e-5, || format!("dual gradient differs by {worst_g:e}"))?;

    // Assignment objective along the iterations.
    let mut steps = 0;
    for seed in 0..20 {
        let p = random_problem(2000 + seed, &SMALL);
        let prices = vec![250.0; p.location_count()];
        let g = GcdaProblem::new(&p.network, &p.trips, &p.params, &prices, 1.0).map_err(|e| e.to_string())?;
        let sol = solve_gcda_with(
            &g,
            &GcdaOptions {
                tol: 1e-6,
                ..GcdaOptions::default()
            },
        )
        .map_err(|e| e.to_string())?;
        ensure(sol.converged, || format!("assignment {seed} did not reach the gap threshold"))?;
        for (i, w) in sol.history.windows(2).enumerate() {
            ensure(w[1] < w[0], || format!("assignment {seed}: objective rose at step {}: {} -> {}", i + 1, w[0], w[1]))?;
        }
        steps += sol.history.len().saturating_sub(1);
    }
    Ok(format!(
        "quadrature {worst_q:.1e}, dual gradient {worst_g:.1e}, {steps} assignment steps all decrease"
    ))
}

fn main() {
    let criteria: [(usize, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let mut failed = 0;
    for (n, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        match outcome {
            Ok(detail) => println!("[PASS] criterion {n}: {detail} ({elapsed:.2?})"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] criterion {n}: {detail} ({elapsed:.2?})");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

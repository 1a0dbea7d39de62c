mod common;

use approx::assert_relative_eq;
use common::*;
use isfe::equilibrium::{solve_equilibrium_with, EquilibriumOptions};
use isfe::stochastic::*;

fn opts() -> EquilibriumOptions {
    EquilibriumOptions {
        tol_mc: 1e-8,
        gap_tol: 1e-8,
        ..EquilibriumOptions::default()
    }
}

fn all_cases(
    problem: &isfe::equilibrium::EquilibriumProblem,
    set: &ScenarioSet,
) -> (CaseResults, CaseResults, CaseResults) {
    let o = opts();
    (
        solve_case(problem, set, CaseMode::Deterministic, &o).unwrap(),
        solve_case(problem, set, CaseMode::Stochastic, &o).unwrap(),
        solve_case(problem, set, CaseMode::WaitAndSee, &o).unwrap(),
    )
}

#[test]
fn degenerate_uncertainty_gives_zero_metrics() {
    let set = generate_scenarios(1, 1.0, 1.0, 5).unwrap();
    let p = symmetric_pair(100.0, set.clone());
    let (c1, c2, c3) = all_cases(&p, &set);
    let (eval, basis) = evaluate_deterministic(&p, &c1, &opts()).unwrap();
    assert_eq!(basis, VssBasis::FixedCapacity);
    let m = compute_metrics(&eval, &c2, &c3).unwrap();
    for x in [m.vss_provider, m.vss_user, m.vss_surplus, m.evpi_provider, m.evpi_user, m.evpi_surplus] {
        assert_eq!(x, 0.0);
    }
}

#[test]
fn identical_scenarios_remove_the_value_of_information() {
    let set = ScenarioSet::new(
        vec![Scenario { theta: 1.1, prob: 0.5 }, Scenario { theta: 1.1, prob: 0.5 }],
        None,
    )
    .unwrap();
    let p = symmetric_pair(100.0, set.clone());
    let (_, c2, c3) = all_cases(&p, &set);
    assert_relative_eq!(c2.provider_objective, c3.provider_objective, max_relative = 1e-6);
    assert_relative_eq!(c2.user_utility.unwrap(), c3.user_utility.unwrap(), max_relative = 1e-6);
}

#[test]
fn case_invariants_on_the_symmetric_toy() {
    let set = generate_scenarios(6, 1.0, 1.2, 11).unwrap();
    let p = symmetric_pair(100.0, set.clone());
    let (c1, c2, c3) = all_cases(&p, &set);
    for case in [&c1, &c2, &c3] {
        assert!(case.converged);
        let (surplus, user) = (case.surplus.unwrap(), case.user_utility.unwrap());
        assert!((surplus - (case.provider_objective + user)).abs() <= 1e-9 * surplus.abs().max(1.0));
    }
    let sol = &c2.solutions[0];
    for k in 0..2 {
        for row in &sol.investor.supply {
            assert!(row[k] <= sol.investor.capacity[k] + 1e-9);
        }
    }
    let total = |c: &[f64]| c.iter().sum::<f64>();
    assert!(total(&c2.capacity) >= total(&c1.capacity));
    let rel = (total(&c3.capacity) - total(&c1.capacity)).abs() / total(&c1.capacity);
    assert!(rel <= 0.1, "wait-and-see mean capacity off by {rel}");

    // Deterministic capacity equals mean demand, so high scenarios do not fit.
    let (eval, basis) = evaluate_deterministic(&p, &c1, &opts()).unwrap();
    assert_eq!(basis, VssBasis::DeterministicObjectives);
    assert_eq!(eval, c1);
    let m = compute_metrics(&eval, &c2, &c3).unwrap();
    assert_eq!(m.vss_provider, c2.provider_objective - c1.provider_objective);
    assert_eq!(m.evpi_user, c3.user_utility.unwrap() - c2.user_utility.unwrap());
}

#[test]
fn fixed_capacity_evaluation_when_it_fits() {
    // Scenarios below the mean never exceed the deterministic capacity
    // once it is sized for the larger one.
    let set = ScenarioSet::new(
        vec![Scenario { theta: 0.8, prob: 0.5 }, Scenario { theta: 1.0, prob: 0.5 }],
        None,
    )
    .unwrap();
    let p = symmetric_pair(100.0, set.clone());
    let mut c1 = solve_case(&p, &set, CaseMode::Deterministic, &opts()).unwrap();
    c1.capacity = vec![60.0, 60.0];
    let (eval, basis) = evaluate_deterministic(&p, &c1, &opts()).unwrap();
    assert_eq!(basis, VssBasis::FixedCapacity);
    assert_eq!(eval.capacity, vec![60.0, 60.0]);
    assert_eq!(eval.solutions[0].fixed_capacity, Some(vec![60.0, 60.0]));
}

#[test]
fn metrics_reject_mismatched_cases() {
    let a = generate_scenarios(2, 1.0, 1.2, 1).unwrap();
    let b = generate_scenarios(2, 1.0, 1.2, 2).unwrap();
    let p = single_facility(100.0, a.clone());
    let c1 = solve_case(&p, &a, CaseMode::Deterministic, &opts()).unwrap();
    let c2 = solve_case(&p, &b, CaseMode::Stochastic, &opts()).unwrap();
    assert!(compute_metrics(&c1, &c2, &c2).is_err());
}

#[test]
fn unpriced_utility_is_reported_as_missing() {
    let set = ScenarioSet::single(1.0);
    let mut p = symmetric_pair(100.0, set.clone());
    p.params.beta2 = 0.0;
    let (c1, c2, c3) = all_cases(&p, &set);
    assert!(c1.user_utility.is_none() && c1.surplus.is_none());
    assert!(compute_metrics(&c1, &c2, &c3).is_err());
}

#[test]
fn total_utility_arithmetic() {
    let p = single_facility(100.0, ScenarioSet::single(1.0));
    let mut sol = solve_equilibrium_with(&p, &opts()).unwrap();
    sol.gcda[0].q = vec![100.0];
    sol.gcda[0].tau = vec![10.0];
    sol.prices.rho = vec![vec![340.0]];
    let u = total_utility(&sol, &p.params, &p.trips, &[1.0]).unwrap();
    assert_relative_eq!(u, (1.0 / 0.06) * 100.0 * (-10.0 - 20.4), max_relative = 1e-12);
    assert_relative_eq!(u, -50_666.666_666_666_67, max_relative = 1e-12);

    // Shifting every price moves utility by the expected service bill.
    sol.prices.rho = vec![vec![350.0]];
    let shifted = total_utility(&sol, &p.params, &p.trips, &[1.0]).unwrap();
    assert_relative_eq!(shifted - u, -100.0 * 10.0, max_relative = 1e-9);

    sol.gcda[0].q = vec![0.0];
    assert_eq!(total_utility(&sol, &p.params, &p.trips, &[1.0]).unwrap(), 0.0);

    let mut params = p.params.clone();
    params.beta2 = 0.0;
    assert!(total_utility(&sol, &params, &p.trips, &[1.0]).is_err());
}

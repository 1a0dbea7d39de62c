//! Instance builders shared by the integration tests.

#![allow(dead_code)]

use isfe::equilibrium::EquilibriumProblem;
use isfe::gcda::UtilityParams;
use isfe::investor::{LocationCost, QuadraticCost};
use isfe::network::{Link, Network, NodeRoles, OdPair, TripTable};
use isfe::stochastic::ScenarioSet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Capital (0.1, 170) and operating (0.1, 130) at every location.
pub fn base_costs(locations: usize) -> Vec<LocationCost> {
    vec![
        LocationCost::quadratic(
            QuadraticCost::new(0.1, 170.0).unwrap(),
            QuadraticCost::new(0.1, 130.0).unwrap(),
        );
        locations
    ]
}

pub fn base_params(locations: usize) -> UtilityParams {
    UtilityParams::uniform(locations, 0.0, 1.0, 0.06).unwrap()
}

/// r -> k -> s, every trip must stop at k.
pub fn single_facility(demand: f64, scenarios: ScenarioSet) -> EquilibriumProblem {
    let links = vec![Link::new(0, 1, 5.0, 200.0), Link::new(1, 2, 5.0, 200.0)];
    let roles = NodeRoles {
        origins: vec![0],
        destinations: vec![2],
        candidates: vec![1],
    };
    let net = Network::new(3, links, roles).unwrap();
    let trips = TripTable::new(
        vec![OdPair {
            origin: 0,
            destination: 2,
            demand,
            service: 1.0,
            facilities: vec![0],
        }],
        &net,
    )
    .unwrap();
    EquilibriumProblem::new(net, trips, base_params(1), base_costs(1), scenarios).unwrap()
}

/// Two mirror-image facilities between r and s.
pub fn symmetric_pair(demand: f64, scenarios: ScenarioSet) -> EquilibriumProblem {
    let links = vec![
        Link::new(0, 1, 5.0, 200.0),
        Link::new(1, 3, 5.0, 200.0),
        Link::new(0, 2, 5.0, 200.0),
        Link::new(2, 3, 5.0, 200.0),
    ];
    let roles = NodeRoles {
        origins: vec![0],
        destinations: vec![3],
        candidates: vec![1, 2],
    };
    let net = Network::new(4, links, roles).unwrap();
    let trips = TripTable::new(
        vec![OdPair {
            origin: 0,
            destination: 3,
            demand,
            service: 1.0,
            facilities: vec![0, 1],
        }],
        &net,
    )
    .unwrap();
    EquilibriumProblem::new(net, trips, base_params(2), base_costs(2), scenarios).unwrap()
}

pub struct RandomSpec {
    pub max_nodes: usize,
    pub max_locations: usize,
    pub max_scenarios: usize,
}

/// A strongly connected random instance: a bidirectional ring plus chords,
/// one to three OD pairs, random quadratic costs.
pub fn random_problem(seed: u64, spec: &RandomSpec) -> EquilibriumProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(4..=spec.max_nodes);
    let mut links = Vec::new();
    let link = |rng: &mut ChaCha8Rng, a: usize, b: usize| {
        Link::new(a, b, rng.gen_range(1.0..10.0), rng.gen_range(40.0..300.0))
    };
    for i in 0..n {
        let j = (i + 1) % n;
        let l1 = link(&mut rng, i, j);
        let l2 = link(&mut rng, j, i);
        links.push(l1);
        links.push(l2);
    }
    for _ in 0..rng.gen_range(0..=n / 2) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b && (a + 1) % n != b && (b + 1) % n != a {
            let l = link(&mut rng, a, b);
            links.push(l);
        }
    }
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.shuffle(&mut rng);
    let m = rng.gen_range(1..=spec.max_locations.min(n));
    let mut candidates = nodes[..m].to_vec();
    candidates.sort_unstable();

    let mut pairs = Vec::new();
    let n_pairs = rng.gen_range(1..=3);
    while pairs.len() < n_pairs {
        let r = rng.gen_range(0..n);
        let s = rng.gen_range(0..n);
        if r == s || pairs.iter().any(|p: &OdPair| p.origin == r && p.destination == s) {
            continue;
        }
        pairs.push(OdPair {
            origin: r,
            destination: s,
            demand: rng.gen_range(10.0..100.0),
            service: rng.gen_range(0.5..2.0),
            facilities: (0..m).collect(),
        });
    }
    let mut origins: Vec<usize> = pairs.iter().map(|p| p.origin).collect();
    let mut destinations: Vec<usize> = pairs.iter().map(|p| p.destination).collect();
    origins.sort_unstable();
    origins.dedup();
    destinations.sort_unstable();
    destinations.dedup();
    let roles = NodeRoles {
        origins,
        destinations,
        candidates,
    };
    let net = Network::new(n, links, roles).unwrap();
    let trips = TripTable::new(pairs, &net).unwrap();

    let costs = (0..m)
        .map(|_| {
            LocationCost::quadratic(
                QuadraticCost::new(rng.gen_range(0.05..0.5), rng.gen_range(50.0..200.0)).unwrap(),
                QuadraticCost::new(rng.gen_range(0.05..0.5), rng.gen_range(50.0..150.0)).unwrap(),
            )
        })
        .collect();
    let beta0 = (0..m).map(|_| rng.gen_range(0.0..2.0)).collect();
    let params = UtilityParams::new(beta0, 1.0, rng.gen_range(0.02..0.2)).unwrap();
    let n_xi = rng.gen_range(1..=spec.max_scenarios);
    let scenarios = if n_xi == 1 {
        ScenarioSet::single(rng.gen_range(0.8..1.2))
    } else {
        let p = rng.gen_range(0.2..0.8);
        ScenarioSet::new(
            vec![
                isfe::stochastic::Scenario {
                    theta: rng.gen_range(0.8..1.2),
                    prob: p,
                },
                isfe::stochastic::Scenario {
                    theta: rng.gen_range(0.8..1.2),
                    prob: 1.0 - p,
                },
            ],
            None,
        )
        .unwrap()
    };
    EquilibriumProblem::new(net, trips, params, costs, scenarios).unwrap()
}

pub fn max_rel_diff(a: &[f64], b: &[f64], scale: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(scale))
        .fold(0.0, f64::max)
}

pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sioux_falls")
}

/// The Sioux Falls study network with the base parameters and costs.
pub fn sioux_falls(scenarios: ScenarioSet) -> EquilibriumProblem {
    use isfe::network::{parse_network, parse_roles, parse_trips};
    let dir = data_dir();
    let read = |f: &str| std::fs::read_to_string(dir.join(f)).unwrap();
    let roles = parse_roles(&read("roles.txt")).unwrap();
    let net = parse_network(&read("SiouxFalls_net.tntp"), roles).unwrap();
    let trips = parse_trips(&read("trips.txt"), &net).unwrap();
    let k = net.location_count();
    EquilibriumProblem::new(net, trips, base_params(k), base_costs(k), scenarios).unwrap()
}

//! Road network model: BPR links, node roles, trip tables and shortest paths.
//!
//! Node indices are zero-based inside the crate. Files and error messages use
//! the one-based ids of the TNTP convention.

mod paths;
mod tntp;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use paths::{leg_times, shortest_paths, LegTrees, ShortestPathTree};
pub use tntp::{parse_network, parse_roles, parse_trips, NodeRoles};

pub const DEFAULT_BPR_ALPHA: f64 = 0.15;
pub const DEFAULT_BPR_BETA: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{role} node {node} is not a node of the network")]
    UnknownNode { role: &'static str, node: usize },
    #[error("link {index}: {reason}")]
    InvalidLink { index: usize, reason: String },
    #[error("no path from node {from} to node {to}")]
    Disconnected { from: usize, to: usize },
    #[error("triple (r={origin}, s={destination}, k={facility}) has an unreachable leg")]
    UnreachableLeg {
        origin: usize,
        destination: usize,
        facility: usize,
    },
    #[error("trip table: {0}")]
    InvalidTrips(String),
    #[error("negative flow {0}")]
    NegativeFlow(f64),
    #[error("link {link} has non-positive travel time {time}")]
    NonPositiveTime { link: usize, time: f64 },
}

/// A directed link with a BPR performance function
/// `t(v) = t0 * (1 + alpha * (v / cap)^beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub tail: usize,
    pub head: usize,
    pub free_flow_time: f64,
    pub capacity: f64,
    pub alpha: f64,
    pub beta: u32,
}

impl Link {
    pub fn new(tail: usize, head: usize, free_flow_time: f64, capacity: f64) -> Self {
        Link {
            tail,
            head,
            free_flow_time,
            capacity,
            alpha: DEFAULT_BPR_ALPHA,
            beta: DEFAULT_BPR_BETA,
        }
    }

    pub fn with_bpr(mut self, alpha: f64, beta: u32) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    fn validate(&self, index: usize, node_count: usize) -> Result<(), NetworkError> {
        let fail = |reason: &str| {
            Err(NetworkError::InvalidLink {
                index,
                reason: reason.to_string(),
            })
        };
        if self.tail >= node_count || self.head >= node_count {
            return fail("endpoint outside the node set");
        }
        if self.tail == self.head {
            return fail("self loop");
        }
        if !(self.free_flow_time > 0.0 && self.free_flow_time.is_finite()) {
            return fail("free-flow time must be positive");
        }
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return fail("capacity must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail("BPR alpha must be nonnegative");
        }
        if self.beta < 1 {
            return fail("BPR exponent must be at least 1");
        }
        Ok(())
    }

    /// Travel time at `flow`. Callers guarantee `flow >= 0`.
    #[inline]
    pub fn time(&self, flow: f64) -> f64 {
        let ratio = flow / self.capacity;
        self.free_flow_time * (1.0 + self.alpha * ratio.powi(self.beta as i32))
    }

    /// Closed form of the integral of `time` over `[0, flow]`.
    #[inline]
    pub fn time_integral(&self, flow: f64) -> f64 {
        let b = self.beta as i32;
        let tail = self.alpha * flow * (flow / self.capacity).powi(b) / (b + 1) as f64;
        self.free_flow_time * (flow + tail)
    }

    /// Derivative of `time` with respect to flow.
    #[inline]
    pub fn time_derivative(&self, flow: f64) -> f64 {
        let b = self.beta as i32;
        self.free_flow_time * self.alpha * b as f64 * (flow / self.capacity).powi(b - 1)
            / self.capacity
    }
}

/// Checked travel-time evaluation.
pub fn link_time(link: &Link, flow: f64) -> Result<f64, NetworkError> {
    if flow < 0.0 {
        return Err(NetworkError::NegativeFlow(flow));
    }
    Ok(link.time(flow))
}

/// Checked evaluation of the integral of the travel-time function.
pub fn link_time_integral(link: &Link, flow: f64) -> Result<f64, NetworkError> {
    if flow < 0.0 {
        return Err(NetworkError::NegativeFlow(flow));
    }
    Ok(link.time_integral(flow))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    node_count: usize,
    links: Vec<Link>,
    origins: Vec<usize>,
    destinations: Vec<usize>,
    /// Candidate facility nodes. A location index is a position in this list.
    candidates: Vec<usize>,
    #[serde(skip)]
    outgoing: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(node_count: usize, links: Vec<Link>, roles: NodeRoles) -> Result<Self, NetworkError> {
        for (i, link) in links.iter().enumerate() {
            link.validate(i, node_count)?;
        }
        for (role, nodes) in [
            ("origin", &roles.origins),
            ("destination", &roles.destinations),
            ("candidate", &roles.candidates),
        ] {
            if let Some(&node) = nodes.iter().find(|&&n| n >= node_count) {
                return Err(NetworkError::UnknownNode {
                    role,
                    node: node + 1,
                });
            }
        }
        let mut net = Network {
            node_count,
            links,
            origins: roles.origins,
            destinations: roles.destinations,
            candidates: roles.candidates,
            outgoing: Vec::new(),
        };
        net.rebuild_adjacency();
        Ok(net)
    }

    fn rebuild_adjacency(&mut self) {
        let mut outgoing = vec![Vec::new(); self.node_count];
        for (i, link) in self.links.iter().enumerate() {
            outgoing[link.tail].push(i);
        }
        self.outgoing = outgoing;
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn destinations(&self) -> &[usize] {
        &self.destinations
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn location_count(&self) -> usize {
        self.candidates.len()
    }

    pub fn location_of(&self, node: usize) -> Option<usize> {
        self.candidates.iter().position(|&k| k == node)
    }

    pub fn outgoing(&self, node: usize) -> &[usize] {
        &self.outgoing[node]
    }

    /// Copy of the network with every BPR alpha set to zero, so link times
    /// stay at free flow.
    pub fn without_congestion(&self) -> Network {
        let mut net = self.clone();
        for link in &mut net.links {
            link.alpha = 0.0;
        }
        net
    }

    /// Copy of the network with every BPR capacity multiplied by `factor`.
    pub fn with_capacity_scale(&self, factor: f64) -> Network {
        let mut net = self.clone();
        for link in &mut net.links {
            link.capacity *= factor;
        }
        net
    }

    /// Signed node-link incidence product `A x`: +x at the tail, -x at the head.
    pub fn incidence_product(&self, link_values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.node_count];
        for (link, &x) in self.links.iter().zip(link_values) {
            out[link.tail] += x;
            out[link.head] -= x;
        }
        out
    }

    /// Nodes reachable from `source` by following links, ignoring times.
    pub fn reachable_from(&self, source: usize) -> Vec<bool> {
        let mut seen = vec![false; self.node_count];
        let mut stack = vec![source];
        seen[source] = true;
        while let Some(u) = stack.pop() {
            for &a in &self.outgoing[u] {
                let h = self.links[a].head;
                if !seen[h] {
                    seen[h] = true;
                    stack.push(h);
                }
            }
        }
        seen
    }
}

/// One origin-destination pair with its facility choice set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdPair {
    pub origin: usize,
    pub destination: usize,
    /// Trips per period.
    pub demand: f64,
    /// Service units consumed per trip.
    pub service: f64,
    /// Allowed facilities as location indices.
    pub facilities: Vec<usize>,
}

/// A facility choice `(r, s, k)`, indexed in a flat vector by [`TripTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub pair: usize,
    pub location: usize,
    pub origin: usize,
    pub destination: usize,
    pub facility: usize,
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(r={}, s={}, k={})",
            self.origin + 1,
            self.destination + 1,
            self.facility + 1
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripTable {
    pairs: Vec<OdPair>,
    #[serde(skip)]
    offsets: Vec<usize>,
    #[serde(skip)]
    triples: Vec<Triple>,
}

impl TripTable {
    /// Builds a trip table and checks it against the network, including
    /// reachability of every leg `r -> k` and `k -> s` that carries demand.
    pub fn new(pairs: Vec<OdPair>, network: &Network) -> Result<Self, NetworkError> {
        for p in &pairs {
            if p.origin >= network.node_count() || p.destination >= network.node_count() {
                return Err(NetworkError::InvalidTrips(format!(
                    "pair ({}, {}) references an unknown node",
                    p.origin + 1,
                    p.destination + 1
                )));
            }
            if !(p.demand >= 0.0 && p.demand.is_finite()) {
                return Err(NetworkError::InvalidTrips(format!(
                    "pair ({}, {}) has invalid demand {}",
                    p.origin + 1,
                    p.destination + 1,
                    p.demand
                )));
            }
            if !(p.service >= 0.0 && p.service.is_finite()) {
                return Err(NetworkError::InvalidTrips(format!(
                    "pair ({}, {}) has invalid service quantity {}",
                    p.origin + 1,
                    p.destination + 1,
                    p.service
                )));
            }
            if p.demand > 0.0 && p.facilities.is_empty() {
                return Err(NetworkError::InvalidTrips(format!(
                    "pair ({}, {}) has demand but no allowed facility",
                    p.origin + 1,
                    p.destination + 1
                )));
            }
            if let Some(&k) = p.facilities.iter().find(|&&k| k >= network.location_count()) {
                return Err(NetworkError::InvalidTrips(format!(
                    "pair ({}, {}) references location index {k} outside the candidate set",
                    p.origin + 1,
                    p.destination + 1
                )));
            }
        }
        let mut table = TripTable {
            pairs,
            offsets: Vec::new(),
            triples: Vec::new(),
        };
        table.index(network);
        table.check_connectivity(network)?;
        Ok(table)
    }

    fn index(&mut self, network: &Network) {
        self.offsets.clear();
        self.triples.clear();
        for (i, p) in self.pairs.iter().enumerate() {
            self.offsets.push(self.triples.len());
            for &k in &p.facilities {
                self.triples.push(Triple {
                    pair: i,
                    location: k,
                    origin: p.origin,
                    destination: p.destination,
                    facility: network.candidates()[k],
                });
            }
        }
        self.offsets.push(self.triples.len());
    }

    fn check_connectivity(&self, network: &Network) -> Result<(), NetworkError> {
        let mut reach: Vec<Option<Vec<bool>>> = vec![None; network.node_count()];
        let mut reaches = |from: usize, to: usize| {
            reach[from].get_or_insert_with(|| network.reachable_from(from))[to]
        };
        for t in &self.triples {
            if self.pairs[t.pair].demand <= 0.0 {
                continue;
            }
            if !reaches(t.origin, t.facility) {
                return Err(NetworkError::Disconnected {
                    from: t.origin + 1,
                    to: t.facility + 1,
                });
            }
            if !reaches(t.facility, t.destination) {
                return Err(NetworkError::Disconnected {
                    from: t.facility + 1,
                    to: t.destination + 1,
                });
            }
        }
        Ok(())
    }

    /// Re-derives the triple index after deserialization.
    pub fn reindex(&mut self, network: &Network) {
        self.index(network);
    }

    pub fn pairs(&self) -> &[OdPair] {
        &self.pairs
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    /// Range of triple indices belonging to pair `i`.
    pub fn pair_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Total service demand `sum e * d` at unit demand scale.
    pub fn total_service(&self) -> f64 {
        self.pairs.iter().map(|p| p.demand * p.service).sum()
    }

    pub fn total_demand(&self) -> f64 {
        self.pairs.iter().map(|p| p.demand).sum()
    }

    /// Service demand per location implied by facility flows `q`.
    pub fn service_by_location(&self, q: &[f64], locations: usize) -> Vec<f64> {
        let mut out = vec![0.0; locations];
        for (t, &flow) in self.triples.iter().zip(q) {
            out[t.location] += self.pairs[t.pair].service * flow;
        }
        out
    }
}

/// Link travel times at a given flow pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeField {
    pub link_times: Vec<f64>,
}

impl TimeField {
    pub fn free_flow(network: &Network) -> Self {
        TimeField {
            link_times: network.links().iter().map(|l| l.free_flow_time).collect(),
        }
    }

    pub fn at_flows(network: &Network, flows: &[f64]) -> Self {
        TimeField {
            link_times: network
                .links()
                .iter()
                .zip(flows)
                .map(|(l, &v)| l.time(v.max(0.0)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn bpr_link() -> Link {
        Link::new(0, 1, 10.0, 100.0)
    }

    #[test]
    fn bpr_time_values() {
        let l = bpr_link();
        assert_eq!(link_time(&l, 0.0).unwrap(), 10.0);
        assert_relative_eq!(link_time(&l, 100.0).unwrap(), 11.5, max_relative = 1e-15);
        assert_relative_eq!(link_time(&l, 200.0).unwrap(), 34.0, max_relative = 1e-15);
        assert!(matches!(
            link_time(&l, -1.0),
            Err(NetworkError::NegativeFlow(_))
        ));
    }

    #[test]
    fn bpr_integral_values() {
        let l = bpr_link();
        assert_eq!(link_time_integral(&l, 0.0).unwrap(), 0.0);
        assert_relative_eq!(link_time_integral(&l, 100.0).unwrap(), 1030.0, max_relative = 1e-15);
        assert!(link_time_integral(&l, -0.5).is_err());
    }

    /// Composite Gauss-Legendre quadrature, independent of the closed form.
    fn quadrature(link: &Link, upper: f64) -> f64 {
        const NODES: [f64; 5] = [
            0.0,
            -0.538_469_310_105_683_1,
            0.538_469_310_105_683_1,
            -0.906_179_845_938_664,
            0.906_179_845_938_664,
        ];
        const WEIGHTS: [f64; 5] = [
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_47,
            0.478_628_670_499_366_47,
            0.236_926_885_056_189_08,
            0.236_926_885_056_189_08,
        ];
        let panels = 64;
        let h = upper / panels as f64;
        let mut sum = 0.0;
        for p in 0..panels {
            let mid = (p as f64 + 0.5) * h;
            for (x, w) in NODES.iter().zip(WEIGHTS) {
                sum += w * link.time(mid + 0.5 * h * x);
            }
        }
        sum * 0.5 * h
    }

    #[test]
    fn integral_matches_quadrature() {
        let l = bpr_link();
        let exact = l.time_integral(100.0);
        assert_relative_eq!(quadrature(&l, 100.0), exact, max_relative = 1e-8);
    }

    #[test]
    fn zero_alpha_is_free_flow() {
        let l = bpr_link().with_bpr(0.0, 4);
        assert_eq!(l.time(1e6), 10.0);
        assert_eq!(l.time_integral(50.0), 500.0);
    }

    #[test]
    fn invalid_links_rejected() {
        let roles = NodeRoles::default();
        let bad = vec![Link::new(0, 0, 1.0, 1.0)];
        assert!(Network::new(2, bad, roles.clone()).is_err());
        let bad = vec![Link::new(0, 1, 0.0, 1.0)];
        assert!(Network::new(2, bad, roles.clone()).is_err());
        let bad = vec![Link::new(0, 1, 1.0, -2.0)];
        assert!(Network::new(2, bad, roles.clone()).is_err());
        let bad = vec![Link::new(0, 1, 1.0, 1.0).with_bpr(0.15, 0)];
        assert!(Network::new(2, bad, roles).is_err());
    }

    #[test]
    fn incidence_has_one_plus_and_one_minus_per_link() {
        let links = vec![Link::new(0, 1, 1.0, 1.0), Link::new(1, 2, 1.0, 1.0)];
        let net = Network::new(3, links, NodeRoles::default()).unwrap();
        for a in 0..net.link_count() {
            let mut unit = vec![0.0; net.link_count()];
            unit[a] = 1.0;
            let col = net.incidence_product(&unit);
            assert_eq!(col.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(col.iter().filter(|&&x| x == -1.0).count(), 1);
            assert_eq!(col.iter().filter(|&&x| x == 0.0).count(), 1);
        }
    }

    proptest! {
        #[test]
        fn time_strictly_increasing(v1 in 0.0f64..500.0, dv in 1e-3f64..500.0,
                                    alpha in 0.01f64..1.0, beta in 1u32..6) {
            let l = bpr_link().with_bpr(alpha, beta);
            prop_assert!(l.time(v1 + dv) > l.time(v1));
        }

        #[test]
        fn integral_derivative_is_time(v in 1.0f64..400.0, alpha in 0.0f64..1.0, beta in 1u32..6) {
            let l = bpr_link().with_bpr(alpha, beta);
            let h = 1e-4 * v;
            let fd = (l.time_integral(v + h) - l.time_integral(v - h)) / (2.0 * h);
            prop_assert!((fd - l.time(v)).abs() <= 1e-6 * l.time(v));
        }

        #[test]
        fn derivative_matches_finite_difference(v in 1.0f64..400.0, beta in 1u32..6) {
            let l = bpr_link().with_bpr(0.15, beta);
            let h = 1e-5 * v;
            let fd = (l.time(v + h) - l.time(v - h)) / (2.0 * h);
            prop_assert!((fd - l.time_derivative(v)).abs() <= 1e-6 * fd.abs() + 1e-8);
        }
    }
}

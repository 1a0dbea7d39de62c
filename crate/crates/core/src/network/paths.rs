use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{Network, NetworkError, TimeField, Triple, TripTable};

/// Label-setting shortest-path tree from one source.
#[derive(Debug, Clone)]
pub struct ShortestPathTree {
    pub source: usize,
    /// Distance per node; `f64::INFINITY` marks an unreachable node.
    pub dist: Vec<f64>,
    /// Predecessor link per node; `None` at the source and unreachable nodes.
    pub pred: Vec<Option<usize>>,
    /// Reachable nodes in settlement order (nondecreasing distance).
    order: Vec<usize>,
}

impl ShortestPathTree {
    pub fn reachable(&self, node: usize) -> bool {
        self.dist[node].is_finite()
    }

    /// Links of the tree path from the source to `node`, source end first.
    pub fn path_links(&self, network: &Network, node: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut at = node;
        while let Some(a) = self.pred[at] {
            path.push(a);
            at = network.links()[a].tail;
        }
        path.reverse();
        path
    }

    /// Pushes per-node loads back to the source along predecessor links and
    /// adds the resulting link flows to `flows`. `loads` is consumed.
    pub fn push_loads(&self, network: &Network, loads: &mut [f64], flows: &mut [f64]) {
        for &node in self.order.iter().rev() {
            let load = loads[node];
            if load == 0.0 {
                continue;
            }
            if let Some(a) = self.pred[node] {
                flows[a] += load;
                loads[network.links()[a].tail] += load;
            }
            loads[node] = 0.0;
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_times(network: &Network, times: &TimeField) -> Result<(), NetworkError> {
    if times.link_times.len() != network.link_count() {
        return Err(NetworkError::InvalidLink {
            index: times.link_times.len(),
            reason: format!(
                "time field has {} entries for {} links",
                times.link_times.len(),
                network.link_count()
            ),
        });
    }
    for (link, &time) in times.link_times.iter().enumerate() {
        if !(time > 0.0) || !time.is_finite() {
            return Err(NetworkError::NonPositiveTime { link, time });
        }
    }
    Ok(())
}

/// Dijkstra from `source`. Among equal-cost predecessors the lowest link id
/// wins.
pub fn shortest_paths(
    network: &Network,
    times: &TimeField,
    source: usize,
) -> Result<ShortestPathTree, NetworkError> {
    check_times(network, times)?;
    if source >= network.node_count() {
        return Err(NetworkError::UnknownNode {
            role: "source",
            node: source + 1,
        });
    }
    Ok(dijkstra(network, &times.link_times, source))
}

pub(crate) fn dijkstra(network: &Network, times: &[f64], source: usize) -> ShortestPathTree {
    let n = network.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry {
        dist: 0.0,
        node: source,
    });
    while let Some(Entry { dist: d, node: u }) = heap.pop() {
        if done[u] || d > dist[u] {
            continue;
        }
        done[u] = true;
        order.push(u);
        for &a in network.outgoing(u) {
            let h = network.links()[a].head;
            if done[h] {
                continue;
            }
            let nd = d + times[a];
            if nd < dist[h] {
                dist[h] = nd;
                pred[h] = Some(a);
                heap.push(Entry { dist: nd, node: h });
            } else if nd == dist[h] && pred[h].is_some_and(|p| a < p) {
                pred[h] = Some(a);
            }
        }
    }
    ShortestPathTree {
        source,
        dist,
        pred,
        order,
    }
}

/// Shortest-path trees from every distinct origin and every used facility.
#[derive(Debug, Clone)]
pub struct LegTrees {
    by_origin: Vec<Option<ShortestPathTree>>,
    by_location: Vec<Option<ShortestPathTree>>,
}

impl LegTrees {
    /// Builds trees without validating link times. Callers ensure every time
    /// is positive and finite.
    pub(crate) fn build_unchecked(network: &Network, times: &[f64], trips: &TripTable) -> Self {
        let mut by_origin: Vec<Option<ShortestPathTree>> = vec![None; network.node_count()];
        let mut by_location: Vec<Option<ShortestPathTree>> = vec![None; network.location_count()];
        for t in trips.triples() {
            if by_origin[t.origin].is_none() {
                by_origin[t.origin] = Some(dijkstra(network, times, t.origin));
            }
            if by_location[t.location].is_none() {
                by_location[t.location] = Some(dijkstra(network, times, t.facility));
            }
        }
        LegTrees {
            by_origin,
            by_location,
        }
    }

    pub fn build(
        network: &Network,
        times: &TimeField,
        trips: &TripTable,
    ) -> Result<Self, NetworkError> {
        check_times(network, times)?;
        Ok(Self::build_unchecked(network, &times.link_times, trips))
    }

    pub fn origin_tree(&self, node: usize) -> Option<&ShortestPathTree> {
        self.by_origin[node].as_ref()
    }

    pub fn facility_tree(&self, location: usize) -> Option<&ShortestPathTree> {
        self.by_location[location].as_ref()
    }

    /// `dist(r, k) + dist(k, s)`; infinite when either leg is unreachable.
    pub fn leg_time(&self, t: &Triple) -> f64 {
        let first = self.by_origin[t.origin].as_ref().map_or(f64::INFINITY, |tr| tr.dist[t.facility]);
        let second = self.by_location[t.location]
            .as_ref()
            .map_or(f64::INFINITY, |tr| tr.dist[t.destination]);
        first + second
    }

    /// Leg time per triple. Unreachable legs of pairs with positive demand are
    /// an error; those of zero-demand pairs stay infinite.
    pub fn leg_times(&self, trips: &TripTable) -> Result<Vec<f64>, NetworkError> {
        trips
            .triples()
            .iter()
            .map(|t| {
                let tau = self.leg_time(t);
                if !tau.is_finite() && trips.pairs()[t.pair].demand > 0.0 {
                    Err(NetworkError::UnreachableLeg {
                        origin: t.origin + 1,
                        destination: t.destination + 1,
                        facility: t.facility + 1,
                    })
                } else {
                    Ok(tau)
                }
            })
            .collect()
    }

    /// All-or-nothing assignment of facility flows `q` onto the trees.
    pub fn assign(&self, network: &Network, trips: &TripTable, q: &[f64]) -> Vec<f64> {
        let n = network.node_count();
        let mut flows = vec![0.0; network.link_count()];
        let mut loads = vec![0.0; n];
        for (tree_slot, is_origin) in self
            .by_origin
            .iter()
            .map(|t| (t, true))
            .chain(self.by_location.iter().map(|t| (t, false)))
        {
            let Some(tree) = tree_slot else { continue };
            let mut any = false;
            for (t, &flow) in trips.triples().iter().zip(q) {
                if flow == 0.0 {
                    continue;
                }
                if is_origin && t.origin == tree.source {
                    loads[t.facility] += flow;
                    any = true;
                } else if !is_origin && t.facility == tree.source {
                    loads[t.destination] += flow;
                    any = true;
                }
            }
            if any {
                tree.push_loads(network, &mut loads, &mut flows);
                loads.fill(0.0);
            }
        }
        flows
    }

    /// Per-triple leg link flows `(r -> k, k -> s)` of an all-or-nothing
    /// assignment. Intended for small instances and incidence checks.
    pub fn leg_flows(&self, network: &Network, t: &Triple, flow: f64) -> (Vec<f64>, Vec<f64>) {
        let mut first = vec![0.0; network.link_count()];
        let mut second = vec![0.0; network.link_count()];
        if let Some(tree) = &self.by_origin[t.origin] {
            for a in tree.path_links(network, t.facility) {
                first[a] += flow;
            }
        }
        if let Some(tree) = &self.by_location[t.location] {
            for a in tree.path_links(network, t.destination) {
                second[a] += flow;
            }
        }
        (first, second)
    }
}

/// Composed leg time `dist(r, k) + dist(k, s)` for every triple.
pub fn leg_times(
    network: &Network,
    times: &TimeField,
    trips: &TripTable,
) -> Result<Vec<f64>, NetworkError> {
    LegTrees::build(network, times, trips)?.leg_times(trips)
}

//! The representative facility investor: first-stage capacity per location,
//! second-stage supply per scenario, both price-taking.
//!
//! Prices and supplies are laid out as `[scenario][location]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvestorError {
    #[error("{0}")]
    Domain(String),
    #[error("location {location}: profit grows without bound in capacity")]
    Unbounded { location: usize },
    #[error("location {location}, scenario {scenario}: supply {supply} exceeds capacity {capacity}")]
    Infeasible {
        location: usize,
        scenario: usize,
        supply: f64,
        capacity: f64,
    },
}

/// `a x^2 + b x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub a: f64,
    pub b: f64,
}

impl QuadraticCost {
    pub fn new(a: f64, b: f64) -> Result<Self, InvestorError> {
        if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(InvestorError::Domain(format!(
                "cost coefficients must be finite and nonnegative, got ({a}, {b})"
            )));
        }
        Ok(QuadraticCost { a, b })
    }

    pub fn cost(&self, x: f64) -> f64 {
        self.a * x * x + self.b * x
    }

    pub fn marginal(&self, x: f64) -> f64 {
        2.0 * self.a * x + self.b
    }
}

/// One piece of a piecewise-quadratic cost, valid from `start` to the next
/// piece's start. On the piece the marginal cost is `2 a c + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostPiece {
    pub start: f64,
    pub a: f64,
    pub b: f64,
    /// Total cost at `start`.
    pub offset: f64,
}

/// Least-cost way of building a total capacity from several quadratic
/// investors, as a convex piecewise-quadratic function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCost {
    pub pieces: Vec<CostPiece>,
}

impl AggregateCost {
    fn piece(&self, c: f64) -> &CostPiece {
        let i = self.pieces.partition_point(|p| p.start <= c);
        &self.pieces[i.saturating_sub(1)]
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.pieces.iter().skip(1).map(|p| p.start).collect()
    }

    pub fn cost(&self, c: f64) -> f64 {
        let p = self.piece(c);
        let d = c - p.start;
        p.offset + p.a * (c * c - p.start * p.start) + p.b * d
    }

    pub fn marginal(&self, c: f64) -> f64 {
        let p = self.piece(c);
        2.0 * p.a * c + p.b
    }
}

/// Capital cost of one location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CapitalCost {
    Quadratic(QuadraticCost),
    /// Precomputed aggregate of several investors.
    Aggregate(AggregateCost),
    /// Several investors whose marginal costs are equalized numerically at
    /// every evaluation.
    Investors { profiles: Vec<QuadraticCost> },
}

impl CapitalCost {
    pub fn cost(&self, c: f64) -> f64 {
        match self {
            CapitalCost::Quadratic(q) => q.cost(c),
            CapitalCost::Aggregate(agg) => agg.cost(c),
            CapitalCost::Investors { profiles } => {
                let m = equalized_marginal(profiles, c);
                profiles
                    .iter()
                    .map(|p| p.cost(((m - p.b) / (2.0 * p.a)).max(0.0)))
                    .sum()
            }
        }
    }

    pub fn marginal(&self, c: f64) -> f64 {
        match self {
            CapitalCost::Quadratic(q) => q.marginal(c),
            CapitalCost::Aggregate(agg) => agg.marginal(c),
            CapitalCost::Investors { profiles } => equalized_marginal(profiles, c),
        }
    }

    /// Second derivative of the cost at `c` (right derivative at breakpoints).
    pub fn curvature(&self, c: f64) -> f64 {
        self.local_quadratic(c).0 * 2.0
    }

    /// Coefficients `(a, b)` with marginal cost `2 a x + b` near `c`.
    fn local_quadratic(&self, c: f64) -> (f64, f64) {
        match self {
            CapitalCost::Quadratic(q) => (q.a, q.b),
            CapitalCost::Aggregate(agg) => {
                let p = agg.piece(c);
                (p.a, p.b)
            }
            CapitalCost::Investors { profiles } => {
                let m = equalized_marginal(profiles, c);
                let (mut gamma, mut beta) = (0.0, 0.0);
                for p in profiles.iter().filter(|p| p.b <= m) {
                    gamma += 1.0 / (2.0 * p.a);
                    beta += p.b / (2.0 * p.a);
                }
                if gamma == 0.0 {
                    let p = profiles
                        .iter()
                        .min_by(|x, y| x.b.total_cmp(&y.b))
                        .expect("validated nonempty");
                    (p.a, p.b)
                } else {
                    (0.5 / gamma, beta / gamma)
                }
            }
        }
    }

    fn validate(&self) -> Result<(), InvestorError> {
        match self {
            CapitalCost::Quadratic(q) => QuadraticCost::new(q.a, q.b).map(|_| ()),
            CapitalCost::Aggregate(agg) => {
                if agg.pieces.is_empty() {
                    Err(InvestorError::Domain("aggregate cost has no pieces".into()))
                } else {
                    Ok(())
                }
            }
            CapitalCost::Investors { profiles } => check_profiles(profiles),
        }
    }
}

impl From<QuadraticCost> for CapitalCost {
    fn from(q: QuadraticCost) -> Self {
        CapitalCost::Quadratic(q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationCost {
    pub capital: CapitalCost,
    pub operating: QuadraticCost,
}

impl LocationCost {
    pub fn quadratic(capital: QuadraticCost, operating: QuadraticCost) -> Self {
        LocationCost {
            capital: capital.into(),
            operating,
        }
    }

    pub fn validate(&self) -> Result<(), InvestorError> {
        self.capital.validate()?;
        QuadraticCost::new(self.operating.a, self.operating.b)?;
        Ok(())
    }

    pub fn strictly_convex(&self) -> bool {
        let capital = match &self.capital {
            CapitalCost::Quadratic(q) => q.a > 0.0,
            CapitalCost::Aggregate(agg) => agg.pieces.iter().all(|p| p.a > 0.0),
            CapitalCost::Investors { .. } => true,
        };
        capital && self.operating.a > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvestorSolution {
    /// Capacity per location.
    pub capacity: Vec<f64>,
    /// Supply per scenario and location.
    pub supply: Vec<Vec<f64>>,
    /// Expected net profit.
    pub profit: f64,
}

/// Profit-maximizing supply at `price` under a capacity cap.
pub fn optimal_supply(price: f64, operating: &QuadraticCost, cap: f64) -> f64 {
    if operating.a == 0.0 {
        return if price > operating.b { cap } else { 0.0 };
    }
    ((price - operating.b) / (2.0 * operating.a)).clamp(0.0, cap)
}

/// Marginal value of one more unit of capacity at level `c`.
fn capacity_rent(prices: &[f64], probs: &[f64], operating: &QuadraticCost, c: f64) -> f64 {
    prices
        .iter()
        .zip(probs)
        .map(|(&rho, &pi)| pi * (rho - operating.marginal(c)).max(0.0))
        .sum()
}

fn check_probs(probs: &[f64]) -> Result<(), InvestorError> {
    if probs.is_empty() {
        return Err(InvestorError::Domain("no scenarios".into()));
    }
    if probs.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(InvestorError::Domain("scenario probabilities must be positive".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(InvestorError::Domain(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// Capacity and per-scenario supplies maximizing expected profit at one
/// location. `prices` holds this location's price in each scenario.
pub fn solve_location(
    prices: &[f64],
    probs: &[f64],
    cost: &LocationCost,
) -> Result<(f64, Vec<f64>), InvestorError> {
    solve_location_at(prices, probs, cost, 0)
}

fn solve_location_at(
    prices: &[f64],
    probs: &[f64],
    cost: &LocationCost,
    location: usize,
) -> Result<(f64, Vec<f64>), InvestorError> {
    if prices.len() != probs.len() {
        return Err(InvestorError::Domain(format!(
            "{} prices for {} scenarios",
            prices.len(),
            probs.len()
        )));
    }
    let op = &cost.operating;
    let slope = |c: f64| capacity_rent(prices, probs, op, c) - cost.capital.marginal(c);

    let mut c = 0.0;
    if slope(0.0) > 0.0 {
        let mut hi = if op.a > 0.0 {
            prices
                .iter()
                .map(|&rho| (rho - op.b) / (2.0 * op.a))
                .fold(0.0, f64::max)
        } else {
            1.0
        };
        let mut doublings = 0;
        while slope(hi) > 0.0 {
            hi = 2.0 * hi.max(1.0);
            doublings += 1;
            if doublings > 200 {
                return Err(InvestorError::Unbounded { location });
            }
        }
        let mut lo = 0.0;
        while hi - lo > 1e-11 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if slope(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        c = 0.5 * (lo + hi);
        if let Some(exact) = polish(prices, probs, cost, c) {
            c = exact;
        }
    }
    let supply = prices.iter().map(|&rho| optimal_supply(rho, op, c)).collect();
    Ok((c, supply))
}

/// Solves the first-order condition exactly on the active set found by
/// bisection: `sum_B pi (rho - b_g - 2 a_g c) = 2 a_c c + b_c`.
fn polish(prices: &[f64], probs: &[f64], cost: &LocationCost, c: f64) -> Option<f64> {
    let op = &cost.operating;
    let (ac, bc) = cost.capital.local_quadratic(c);
    let (mut mass, mut rent) = (0.0, 0.0);
    for (&rho, &pi) in prices.iter().zip(probs) {
        if rho - op.marginal(c) > 0.0 {
            mass += pi;
            rent += pi * (rho - op.b);
        }
    }
    let denom = 2.0 * op.a * mass + 2.0 * ac;
    if denom <= 0.0 {
        return None;
    }
    let exact = (rent - bc) / denom;
    ((exact - c).abs() <= 1e-8 * c.max(1.0) && exact >= 0.0).then_some(exact)
}

/// Solves every location independently.
pub fn solve_investor(
    rho: &[Vec<f64>],
    probs: &[f64],
    costs: &[LocationCost],
) -> Result<InvestorSolution, InvestorError> {
    check_probs(probs)?;
    check_price_shape(rho, probs.len(), costs.len())?;
    for c in costs {
        c.validate()?;
    }
    let n_loc = costs.len();
    let mut capacity = vec![0.0; n_loc];
    let mut supply = vec![vec![0.0; n_loc]; probs.len()];
    for (k, cost) in costs.iter().enumerate() {
        let prices: Vec<f64> = rho.iter().map(|row| row[k]).collect();
        let (c, g) = solve_location_at(&prices, probs, cost, k)?;
        capacity[k] = c;
        for (row, gk) in supply.iter_mut().zip(g) {
            row[k] = gk;
        }
    }
    let mut sol = InvestorSolution {
        capacity,
        supply,
        profit: 0.0,
    };
    sol.profit = investor_objective(&sol, rho, probs, costs)?;
    Ok(sol)
}

fn check_price_shape(rho: &[Vec<f64>], scenarios: usize, locations: usize) -> Result<(), InvestorError> {
    if rho.len() != scenarios || rho.iter().any(|r| r.len() != locations) {
        return Err(InvestorError::Domain(format!(
            "price field must be {scenarios} scenarios x {locations} locations"
        )));
    }
    Ok(())
}

/// Expected revenue minus operating cost, minus capital cost.
pub fn investor_objective(
    solution: &InvestorSolution,
    rho: &[Vec<f64>],
    probs: &[f64],
    costs: &[LocationCost],
) -> Result<f64, InvestorError> {
    check_price_shape(rho, probs.len(), costs.len())?;
    check_price_shape(&solution.supply, probs.len(), costs.len())?;
    if solution.capacity.len() != costs.len() {
        return Err(InvestorError::Domain("capacity vector length mismatch".into()));
    }
    let mut total = 0.0;
    for (xi, (prices, pi)) in rho.iter().zip(probs).enumerate() {
        for (k, cost) in costs.iter().enumerate() {
            let g = solution.supply[xi][k];
            let c = solution.capacity[k];
            if g < 0.0 || g > c + 1e-9 * c.max(1.0) {
                return Err(InvestorError::Infeasible {
                    location: k,
                    scenario: xi,
                    supply: g,
                    capacity: c,
                });
            }
            total += pi * (prices[k] * g - cost.operating.cost(g));
        }
    }
    for (k, cost) in costs.iter().enumerate() {
        total -= cost.capital.cost(solution.capacity[k]);
    }
    Ok(total)
}

fn check_profiles(profiles: &[QuadraticCost]) -> Result<(), InvestorError> {
    if profiles.is_empty() {
        return Err(InvestorError::Domain("empty investor profile list".into()));
    }
    if let Some(p) = profiles.iter().find(|p| !(p.a > 0.0 && p.b >= 0.0)) {
        return Err(InvestorError::Domain(format!(
            "investor profile ({}, {}) needs a > 0 and b >= 0",
            p.a, p.b
        )));
    }
    Ok(())
}

/// Marginal cost `m` at which the investors jointly build `total`, found by
/// bisection on `sum_i max(0, (m - b_i) / (2 a_i)) = total`.
fn equalized_marginal(profiles: &[QuadraticCost], total: f64) -> f64 {
    let built = |m: f64| -> f64 {
        profiles
            .iter()
            .map(|p| ((m - p.b) / (2.0 * p.a)).max(0.0))
            .sum()
    };
    let mut lo = profiles.iter().map(|p| p.b).fold(f64::INFINITY, f64::min);
    if total <= 0.0 {
        return lo;
    }
    let mut hi = lo + 1.0;
    while built(hi) < total {
        hi = lo + 2.0 * (hi - lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if built(mid) < total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Infimal convolution of quadratic investor costs over nonnegative splits.
pub fn aggregate_profiles(profiles: &[QuadraticCost]) -> Result<AggregateCost, InvestorError> {
    check_profiles(profiles)?;
    let mut sorted = profiles.to_vec();
    sorted.sort_by(|x, y| x.b.total_cmp(&y.b));
    let mut pieces: Vec<CostPiece> = Vec::new();
    let (mut gamma, mut beta) = (0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        // Investors sharing the same entry price join together.
        let entry = sorted[i].b;
        while i < sorted.len() && sorted[i].b == entry {
            gamma += 1.0 / (2.0 * sorted[i].a);
            beta += sorted[i].b / (2.0 * sorted[i].a);
            i += 1;
        }
        let start = gamma * entry - beta;
        let offset = match pieces.last() {
            None => 0.0,
            Some(prev) => prev.offset + prev.a * (start * start - prev.start * prev.start) + prev.b * (start - prev.start),
        };
        pieces.push(CostPiece {
            start,
            a: 0.5 / gamma,
            b: beta / gamma,
            offset,
        });
    }
    Ok(AggregateCost { pieces })
}

/// Split of `total` capacity among investors at equal marginal cost. The
/// split sums to `total` exactly.
pub fn allocate_capacity(total: f64, profiles: &[QuadraticCost]) -> Result<Vec<f64>, InvestorError> {
    if !(total >= 0.0 && total.is_finite()) {
        return Err(InvestorError::Domain(format!("total capacity must be nonnegative, got {total}")));
    }
    let agg = aggregate_profiles(profiles)?;
    let m = agg.marginal(total);
    let mut split: Vec<f64> = profiles
        .iter()
        .map(|p| ((m - p.b) / (2.0 * p.a)).max(0.0))
        .collect();
    if total == 0.0 {
        return Ok(vec![0.0; profiles.len()]);
    }
    // Assign round-off to the largest share.
    let largest = split
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    // Snapping the other shares to the grid of `total` makes every partial
    // sum exact, so the shares add up to `total` bit for bit.
    let mut others = 0.0;
    for (i, x) in split.iter_mut().enumerate() {
        if i != largest {
            *x = (*x + total) - total;
            others += *x;
        }
    }
    split[largest] = total - others;
    Ok(split)
}

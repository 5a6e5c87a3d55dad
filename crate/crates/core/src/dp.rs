//! Exact backward recursion for the one-dimensional stochastic knapsack.
//!
//! `V(t, d)` is the optimal expected revenue collected in periods
//! `t..=T` with `d` units left. Period `T` accepts every feasible request;
//! earlier periods compare `p q + V(t+1, d-q)` against `V(t+1, d)` and
//! accept on ties.

use std::io::{self, Write};

use crate::demand::DemandDistribution;
use crate::error::{range, validation, Error, Result};

/// Largest number of table cells any solver will allocate.
pub const TABLE_CELL_BUDGET: u64 = 200_000_000;

/// Largest demand tree the enumeration oracle will walk.
pub const ORACLE_LEAF_BUDGET: u64 = 10_000_000;

/// Dense `(T+1) x (W+1)` table of optimal values.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    horizon: usize,
    capacity: usize,
    values: Vec<f64>,
}

/// Outcome of the threshold rule for one observed request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyDecision {
    pub t: usize,
    pub d: usize,
    pub price: f64,
    pub quantity: u32,
    pub accept: bool,
}

impl ValueTable {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Row-major values, `t` outer.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn idx(&self, t: usize, d: usize) -> usize {
        t * (self.capacity + 1) + d
    }

    /// Unchecked lookup; panics outside the table.
    #[inline]
    pub fn get(&self, t: usize, d: usize) -> f64 {
        assert!(t <= self.horizon && d <= self.capacity, "({t}, {d}) outside table");
        self.values[self.idx(t, d)]
    }

    pub fn value(&self, t: usize, d: usize) -> Result<f64> {
        self.check(t, d)?;
        Ok(self.values[self.idx(t, d)])
    }

    fn check(&self, t: usize, d: usize) -> Result<()> {
        if t > self.horizon || d > self.capacity {
            return Err(range(format!(
                "(t={t}, d={d}) outside table with T={} W={}",
                self.horizon, self.capacity
            )));
        }
        Ok(())
    }

    /// Value of continuing from period `t + 1`, zero past the horizon.
    #[inline]
    fn continuation(&self, t: usize, d: usize) -> f64 {
        if t >= self.horizon {
            0.0
        } else {
            self.values[self.idx(t + 1, d)]
        }
    }

    /// Threshold rule: accept iff the request fits and
    /// `p q + V(t+1, d-q) >= V(t+1, d)`.
    pub fn accept(&self, t: usize, d: usize, price: f64, quantity: u32) -> Result<bool> {
        self.check(t, d)?;
        if quantity == 0 {
            return Err(validation("quantity must be >= 1"));
        }
        Ok(self.accept_unchecked(t, d, price, quantity))
    }

    #[inline]
    pub(crate) fn accept_unchecked(&self, t: usize, d: usize, price: f64, quantity: u32) -> bool {
        let q = quantity as usize;
        if q > d {
            return false;
        }
        price * quantity as f64 + self.continuation(t, d - q) >= self.continuation(t, d)
    }

    pub fn decide(&self, t: usize, d: usize, price: f64, quantity: u32) -> Result<PolicyDecision> {
        let accept = self.accept(t, d, price, quantity)?;
        Ok(PolicyDecision { t, d, price, quantity, accept })
    }

    /// `t,d,value` rows, `t` then `d` ascending.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,d,value")?;
        for t in 0..=self.horizon {
            for d in 0..=self.capacity {
                writeln!(w, "{t},{d},{}", self.values[self.idx(t, d)])?;
            }
        }
        Ok(())
    }
}

pub(crate) fn check_budget(cells: Option<u64>, what: &str) -> Result<u64> {
    match cells {
        Some(c) if c <= TABLE_CELL_BUDGET => Ok(c),
        Some(c) => Err(Error::Resource(format!(
            "{what} needs {c} cells, budget is {TABLE_CELL_BUDGET}"
        ))),
        None => Err(Error::Resource(format!("{what} size overflows u64"))),
    }
}

/// Solves the recursion for capacity `capacity` and last period `horizon`.
pub fn solve_dp(dist: &DemandDistribution, capacity: usize, horizon: usize) -> Result<ValueTable> {
    if horizon < 1 {
        return Err(validation("horizon must be >= 1"));
    }
    let cells = (horizon as u64 + 1).checked_mul(capacity as u64 + 1);
    check_budget(cells, "value table")?;

    let width = capacity + 1;
    let mut values = vec![0.0; (horizon + 1) * width];
    let tail: Vec<f64> = (0..=capacity).map(|d| dist.theta_tail(d as u64)).collect();
    let stay = dist.no_arrival_prob();

    let last = horizon * width;
    for d in 0..=capacity {
        let mut v = 0.0;
        for a in dist.atoms() {
            if a.quantity as usize <= d {
                v += a.prob * a.revenue();
            }
        }
        values[last + d] = v;
    }

    for t in (0..horizon).rev() {
        let (head, next) = values.split_at_mut((t + 1) * width);
        let row = &mut head[t * width..];
        let next = &next[..width];
        for d in 0..=capacity {
            let keep = next[d];
            let mut v = keep * (stay + tail[d]);
            for a in dist.atoms() {
                let q = a.quantity as usize;
                if q <= d {
                    v += a.prob * (a.revenue() + next[d - q]).max(keep);
                }
            }
            row[d] = v;
        }
    }

    Ok(ValueTable { horizon, capacity, values })
}

/// Optimal expected revenue from period `t` with `capacity` units, by
/// exhaustive recursion over every demand sequence and every feasible
/// action, without any table.
pub fn enumeration_oracle(
    dist: &DemandDistribution,
    capacity: usize,
    horizon: usize,
    t: usize,
) -> Result<f64> {
    if t > horizon {
        return Err(range(format!("start period {t} beyond horizon {horizon}")));
    }
    let branches = dist.atoms().len() as u64 + 1;
    let periods = (horizon - t + 1) as u32;
    match branches.checked_pow(periods) {
        Some(n) if n <= ORACLE_LEAF_BUDGET => {}
        _ => {
            return Err(Error::Resource(format!(
                "enumeration tree {branches}^{periods} exceeds {ORACLE_LEAF_BUDGET} leaves"
            )))
        }
    }
    Ok(enumerate(dist, capacity, t, horizon))
}

fn enumerate(dist: &DemandDistribution, d: usize, s: usize, horizon: usize) -> f64 {
    if s > horizon {
        return 0.0;
    }
    let reject = enumerate(dist, d, s + 1, horizon);
    let mut total = dist.no_arrival_prob() * reject;
    for a in dist.atoms() {
        let q = a.quantity as usize;
        let best = if q <= d {
            let take = a.revenue() + enumerate(dist, d - q, s + 1, horizon);
            take.max(reject)
        } else {
            reject
        };
        total += a.prob * best;
    }
    total
}

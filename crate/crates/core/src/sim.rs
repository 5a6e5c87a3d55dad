//! Monte Carlo evaluation of the optimal threshold policy.
//!
//! Paths are simulated independently, each from its own random stream, and
//! stored at *checkpoints*: checkpoint `k` is the state after `k` periods,
//! i.e. at the start of period `start + k`. The reward collected through
//! period `s` inclusive sits at checkpoint `s - start + 1`; the units
//! supplied before period `s` at checkpoint `s - start`.

use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::demand::{Atom, DemandDistribution};
use crate::dp::{solve_dp, ValueTable};
use crate::error::{range, validation, Result};
use crate::rng::substream;
use crate::stats::{bootstrap_var_ci, mean_var};

/// Which checkpoints a simulation keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    /// Every checkpoint `0..=periods`.
    Full,
    /// Only the final state.
    Terminal,
    /// Checkpoints `0, k, 2k, ...` plus the final one.
    Every(usize),
}

impl Recording {
    fn checkpoints(self, periods: usize) -> Vec<usize> {
        match self {
            Recording::Full => (0..=periods).collect(),
            Recording::Terminal => vec![periods],
            Recording::Every(k) => {
                let k = k.max(1);
                let mut v: Vec<usize> = (0..=periods).step_by(k).collect();
                if v.last() != Some(&periods) {
                    v.push(periods);
                }
                v
            }
        }
    }
}

/// Recorded trajectories of reward and units supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub seed: u64,
    /// First simulated period.
    pub start: usize,
    pub initial_capacity: usize,
    /// Recorded checkpoint indices, ascending.
    pub checkpoints: Vec<usize>,
    /// `n_paths x checkpoints.len()`, path-major.
    pub rewards: Vec<f64>,
    pub supplied: Vec<u64>,
}

impl PathEnsemble {
    fn width(&self) -> usize {
        self.checkpoints.len()
    }

    /// Position of checkpoint `k` in the recorded columns.
    pub fn column(&self, k: usize) -> Option<usize> {
        self.checkpoints.binary_search(&k).ok()
    }

    pub fn reward_path(&self, path: usize) -> &[f64] {
        &self.rewards[path * self.width()..(path + 1) * self.width()]
    }

    pub fn supplied_path(&self, path: usize) -> &[u64] {
        &self.supplied[path * self.width()..(path + 1) * self.width()]
    }

    pub fn rewards_at(&self, col: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.rewards[p * self.width() + col]).collect()
    }

    pub fn supplied_at(&self, col: usize) -> Vec<f64> {
        (0..self.n_paths)
            .map(|p| self.supplied[p * self.width() + col] as f64)
            .collect()
    }

    /// Total reward of every path, i.e. samples of `X_{t,d}(T)`.
    pub fn terminal_rewards(&self) -> Vec<f64> {
        self.rewards_at(self.width() - 1)
    }

    pub fn terminal_supplied(&self) -> Vec<f64> {
        self.supplied_at(self.width() - 1)
    }

    /// Per-checkpoint reward statistics with a normal 95% interval for the
    /// mean.
    pub fn summary(&self) -> Vec<SummaryRow> {
        (0..self.width())
            .map(|col| {
                let xs = self.rewards_at(col);
                let (mean, var) = mean_var(&xs);
                let half = 1.96 * (var / xs.len() as f64).sqrt();
                SummaryRow {
                    s: self.start + self.checkpoints[col],
                    mean,
                    var,
                    ci_lo: mean - half,
                    ci_hi: mean + half,
                }
            })
            .collect()
    }

    /// `path,s,reward,supplied`, one row per path and checkpoint.
    pub fn write_paths_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "path,s,reward,supplied")?;
        for p in 0..self.n_paths {
            for (col, &k) in self.checkpoints.iter().enumerate() {
                let i = p * self.width() + col;
                writeln!(w, "{p},{},{},{}", self.start + k, self.rewards[i], self.supplied[i])?;
            }
        }
        Ok(())
    }

    /// `s,mean,var,ci_lo,ci_hi` aggregated over paths.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "s,mean,var,ci_lo,ci_hi")?;
        for r in self.summary() {
            writeln!(w, "{},{},{},{},{}", r.s, r.mean, r.var, r.ci_lo, r.ci_hi)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    /// Period at whose start the statistic is taken.
    pub s: usize,
    pub mean: f64,
    pub var: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Draws one period's request; `None` is the no-arrival outcome.
#[inline]
pub(crate) fn draw<'a, R: Rng>(dist: &'a DemandDistribution, rng: &mut R) -> Option<&'a Atom> {
    let u: f64 = rng.random();
    let mut acc = dist.no_arrival_prob();
    if u < acc {
        return None;
    }
    for a in dist.atoms() {
        acc += a.prob;
        if u < acc {
            return Some(a);
        }
    }
    // rounding left a sliver above the cumulative sum
    dist.atoms().last()
}

fn check_table(dist: &DemandDistribution, table: &ValueTable, t: usize, d: usize) -> Result<()> {
    if t > table.horizon() {
        return Err(validation(format!("start {t} beyond table horizon {}", table.horizon())));
    }
    if d > table.capacity() {
        return Err(validation(format!("capacity {d} beyond table capacity {}", table.capacity())));
    }
    // the terminal row is a closed form of the law, so a mismatch exposes a
    // table solved for another distribution
    let last = table.horizon();
    for cap in 0..=table.capacity() {
        let mut v = 0.0;
        for a in dist.atoms() {
            if a.quantity as usize <= cap {
                v += a.prob * a.revenue();
            }
        }
        if (v - table.get(last, cap)).abs() > 1e-9 * (1.0 + v.abs()) {
            return Err(validation("value table was solved for a different distribution"));
        }
    }
    Ok(())
}

/// Simulates the optimal policy from period `t` with `d` units, keeping
/// every checkpoint.
pub fn simulate(
    dist: &DemandDistribution,
    table: &ValueTable,
    t: usize,
    d: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_with(dist, table, t, d, n_paths, seed, Recording::Full)
}

pub fn simulate_with(
    dist: &DemandDistribution,
    table: &ValueTable,
    t: usize,
    d: usize,
    n_paths: usize,
    seed: u64,
    recording: Recording,
) -> Result<PathEnsemble> {
    check_table(dist, table, t, d)?;
    if n_paths == 0 {
        return Err(validation("n_paths must be positive"));
    }
    let horizon = table.horizon();
    let periods = horizon - t + 1;
    let checkpoints = recording.checkpoints(periods);
    let width = checkpoints.len();

    let rows: Vec<(Vec<f64>, Vec<u64>)> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = substream(seed, path as u64);
            let mut rewards = Vec::with_capacity(width);
            let mut supplied = Vec::with_capacity(width);
            let mut next = 0;
            let (mut reward, mut used, mut cap) = (0.0, 0u64, d);
            for k in 0..=periods {
                if next < width && checkpoints[next] == k {
                    rewards.push(reward);
                    supplied.push(used);
                    next += 1;
                }
                if k == periods {
                    break;
                }
                if let Some(a) = draw(dist, &mut rng) {
                    if table.accept_unchecked(t + k, cap, a.price, a.quantity) {
                        let q = a.quantity as usize;
                        debug_assert!(q <= cap);
                        reward += a.revenue();
                        used += q as u64;
                        cap -= q;
                    }
                }
            }
            (rewards, supplied)
        })
        .collect();

    let mut rewards = Vec::with_capacity(n_paths * width);
    let mut supplied = Vec::with_capacity(n_paths * width);
    for (r, s) in rows {
        rewards.extend(r);
        supplied.extend(s);
    }
    Ok(PathEnsemble {
        n_paths,
        seed,
        start: t,
        initial_capacity: d,
        checkpoints,
        rewards,
        supplied,
    })
}

/// One rung of the variance-scaling ladder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceRow {
    pub n: usize,
    pub mean: f64,
    /// `Var[X_{nt,nd}(nT)] / n`
    pub ratio: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Number of bootstrap resamples behind each variance interval.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// For every scale `n`, solves the DP for `(n t, n d, n T)` (rounded to
/// the lattice), simulates `n_paths` paths and reports the terminal
/// reward variance divided by `n` with a 95% bootstrap interval.
pub fn variance_scaling(
    dist: &DemandDistribution,
    t: f64,
    d: f64,
    horizon: f64,
    scales: &[usize],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    if !(0.0..=horizon).contains(&t) || d < 0.0 {
        return Err(validation("need 0 <= t <= T and d >= 0"));
    }
    scales
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(validation("scale factors must be positive"));
            }
            let nf = n as f64;
            let (ts, ds, hs) = (
                (nf * t).round() as usize,
                (nf * d).round() as usize,
                ((nf * horizon).round() as usize).max(1),
            );
            let table = solve_dp(dist, ds, hs)?;
            let run_seed = seed.wrapping_add(n as u64);
            let ens = simulate_with(dist, &table, ts, ds, n_paths, run_seed, Recording::Terminal)?;
            let x = ens.terminal_rewards();
            let (mean, var) = mean_var(&x);
            let (lo, hi) = bootstrap_var_ci(&x, BOOTSTRAP_RESAMPLES, 0.95, run_seed);
            Ok(VarianceRow { n, mean, ratio: var / nf, ci_lo: lo / nf, ci_hi: hi / nf })
        })
        .collect()
}

/// `n^{-1/2} (y(n r) - n s(r))` for every path at every requested scaled
/// time `r`, where `y(n r)` is the supply recorded at the start of period
/// `round(n r)`. Returns one vector of path values per time.
pub fn scaled_fluctuations<F: Fn(f64) -> f64>(
    ensemble: &PathEnsemble,
    center: F,
    n: f64,
    times: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if n <= 0.0 {
        return Err(validation("scale must be positive"));
    }
    let root = n.sqrt();
    times
        .iter()
        .map(|&r| {
            let s = (n * r).round();
            if r < 0.0 || s < ensemble.start as f64 {
                return Err(range(format!("time {r} precedes the simulated window")));
            }
            let k = s as usize - ensemble.start;
            let col = ensemble
                .column(k)
                .ok_or_else(|| range(format!("time {r} (checkpoint {k}) was not recorded")))?;
            let c = n * center(r);
            Ok(ensemble
                .supplied_at(col)
                .into_iter()
                .map(|y| (y - c) / root)
                .collect())
        })
        .collect()
}

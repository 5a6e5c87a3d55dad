//! Discrete demand laws for the one- and multi-dimensional knapsack.
//!
//! A period either has no arrival (probability `no_arrival`) or exactly one
//! request drawn from a finite list of atoms. All derived quantities (the
//! infeasibility tail, the loss function of the revenue and the acceptance
//! probability at a bid price) are computed here so the DP, PDE and SDE
//! layers agree on the same arithmetic.

use crate::error::{validation, Result};

/// Probability sums must hit one within this slack.
pub const PROB_TOLERANCE: f64 = 1e-12;

/// One support point of the joint (price, quantity) law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    /// Unit offer price.
    pub price: f64,
    /// Requested quantity, at least one unit.
    pub quantity: u32,
    pub prob: f64,
}

impl Atom {
    pub fn new(price: f64, quantity: u32, prob: f64) -> Self {
        Self { price, quantity, prob }
    }

    /// Revenue earned when the request is accepted.
    #[inline]
    pub fn revenue(&self) -> f64 {
        self.price * self.quantity as f64
    }
}

/// Joint law of one period's request, including the no-arrival atom.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandDistribution {
    atoms: Vec<Atom>,
    no_arrival: f64,
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(validation(format!("{what} probability {p} outside [0, 1]")));
    }
    Ok(())
}

impl DemandDistribution {
    /// Builds a validated distribution. Atoms sharing a (price, quantity)
    /// pair are merged in first-occurrence order and zero-probability atoms
    /// are dropped.
    pub fn new(atoms: Vec<Atom>, no_arrival: f64) -> Result<Self> {
        check_prob(no_arrival, "no-arrival")?;
        let mut merged: Vec<Atom> = Vec::with_capacity(atoms.len());
        for a in atoms {
            if !a.price.is_finite() || a.price < 0.0 {
                return Err(validation(format!("price {} must be finite and >= 0", a.price)));
            }
            if a.quantity == 0 {
                return Err(validation("quantities must be >= 1"));
            }
            check_prob(a.prob, "atom")?;
            match merged
                .iter_mut()
                .find(|m| m.price == a.price && m.quantity == a.quantity)
            {
                Some(m) => m.prob += a.prob,
                None => merged.push(a),
            }
        }
        merged.retain(|a| a.prob > 0.0);
        let total = no_arrival + merged.iter().map(|a| a.prob).sum::<f64>();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(validation(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self { atoms: merged, no_arrival })
    }

    /// Convenience constructor: the no-arrival mass is whatever the atoms
    /// leave over.
    pub fn from_arrivals(atoms: Vec<Atom>) -> Result<Self> {
        let arrival: f64 = atoms.iter().map(|a| a.prob).sum();
        let rest = 1.0 - arrival;
        // absorb rounding noise from decimal inputs
        let rest = if rest.abs() <= PROB_TOLERANCE { 0.0 } else { rest };
        Self::new(atoms, rest)
    }

    /// The law that never produces a request.
    pub fn empty() -> Self {
        Self { atoms: Vec::new(), no_arrival: 1.0 }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn no_arrival_prob(&self) -> f64 {
        self.no_arrival
    }

    pub fn arrival_prob(&self) -> f64 {
        self.atoms.iter().map(|a| a.prob).sum()
    }

    pub fn max_price(&self) -> f64 {
        self.atoms.iter().map(|a| a.price).fold(0.0, f64::max)
    }

    pub fn max_quantity(&self) -> u32 {
        self.atoms.iter().map(|a| a.quantity).max().unwrap_or(0)
    }

    pub fn min_quantity(&self) -> u32 {
        self.atoms.iter().map(|a| a.quantity).min().unwrap_or(0)
    }

    /// Every request asks for exactly one unit.
    pub fn is_unit_demand(&self) -> bool {
        self.atoms.iter().all(|a| a.quantity == 1)
    }

    /// E[PQ], with P = 0 on the no-arrival atom.
    pub fn mean_revenue(&self) -> f64 {
        self.atoms.iter().map(|a| a.prob * a.revenue()).sum()
    }

    /// Probability that a request arrives and asks for more than `d` units.
    pub fn theta_tail(&self, d: u64) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.quantity as u64 > d)
            .map(|a| a.prob)
            .sum()
    }

    /// Loss function of the revenue, `E[Q (P - x)^+]`.
    pub fn loss_g(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.prob * a.quantity as f64 * (a.price - x).max(0.0))
            .sum()
    }

    /// Magnitude of the left derivative of `loss_g` at `x`, which bounds
    /// `|g'|` on `[x, inf)` because `g` is convex.
    pub fn loss_slope_bound(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.price >= x)
            .map(|a| a.prob * a.quantity as f64)
            .sum()
    }

    /// Probability that a request arrives with unit price at least `x`.
    /// Ties are accepted.
    pub fn accept_prob(&self, x: f64) -> f64 {
        self.atoms.iter().filter(|a| a.price >= x).map(|a| a.prob).sum()
    }

    /// Mean unit price of the requests that clear `x`; zero when none do.
    pub fn mean_accepted_price(&self, x: f64) -> f64 {
        let mass = self.accept_prob(x);
        if mass <= 0.0 {
            return 0.0;
        }
        let weighted: f64 = self
            .atoms
            .iter()
            .filter(|a| a.price >= x)
            .map(|a| a.prob * a.price)
            .sum();
        weighted / mass
    }

    /// Same law as a one-dimensional [`MultiDemandDistribution`] whose
    /// per-request reward is `price * quantity`.
    pub fn to_multi(&self) -> MultiDemandDistribution {
        MultiDemandDistribution {
            dim: 1,
            atoms: self
                .atoms
                .iter()
                .map(|a| MultiAtom {
                    reward: a.revenue(),
                    quantities: vec![a.quantity],
                    prob: a.prob,
                })
                .collect(),
            no_arrival: self.no_arrival,
        }
    }
}

/// One support point of the m-dimensional law.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiAtom {
    /// Total reward of the request when accepted.
    pub reward: f64,
    pub quantities: Vec<u32>,
    pub prob: f64,
}

impl MultiAtom {
    pub fn new(reward: f64, quantities: Vec<u32>, prob: f64) -> Self {
        Self { reward, quantities, prob }
    }

    /// `q . z`
    #[inline]
    pub(crate) fn weighted(&self, z: &[f64]) -> f64 {
        self.quantities
            .iter()
            .zip(z)
            .map(|(&q, &zk)| zk * q as f64)
            .sum()
    }
}

/// Law of a request for `dim` resource types.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDemandDistribution {
    dim: usize,
    atoms: Vec<MultiAtom>,
    no_arrival: f64,
}

impl MultiDemandDistribution {
    pub fn new(dim: usize, atoms: Vec<MultiAtom>, no_arrival: f64) -> Result<Self> {
        if dim == 0 {
            return Err(validation("dimension must be positive"));
        }
        check_prob(no_arrival, "no-arrival")?;
        let mut merged: Vec<MultiAtom> = Vec::with_capacity(atoms.len());
        for a in atoms {
            if a.quantities.len() != dim {
                return Err(validation(format!(
                    "atom has {} quantity components, expected {dim}",
                    a.quantities.len()
                )));
            }
            if !a.reward.is_finite() || a.reward < 0.0 {
                return Err(validation(format!("reward {} must be finite and >= 0", a.reward)));
            }
            if a.quantities.contains(&0) {
                return Err(validation("all quantity components must be >= 1"));
            }
            check_prob(a.prob, "atom")?;
            match merged
                .iter_mut()
                .find(|m| m.reward == a.reward && m.quantities == a.quantities)
            {
                Some(m) => m.prob += a.prob,
                None => merged.push(a),
            }
        }
        merged.retain(|a| a.prob > 0.0);
        let total = no_arrival + merged.iter().map(|a| a.prob).sum::<f64>();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(validation(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self { dim, atoms: merged, no_arrival })
    }

    pub fn from_arrivals(dim: usize, atoms: Vec<MultiAtom>) -> Result<Self> {
        let arrival: f64 = atoms.iter().map(|a| a.prob).sum();
        let rest = 1.0 - arrival;
        let rest = if rest.abs() <= PROB_TOLERANCE { 0.0 } else { rest };
        Self::new(dim, atoms, rest)
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, atoms: Vec::new(), no_arrival: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[MultiAtom] {
        &self.atoms
    }

    pub fn no_arrival_prob(&self) -> f64 {
        self.no_arrival
    }

    pub fn arrival_prob(&self) -> f64 {
        self.atoms.iter().map(|a| a.prob).sum()
    }

    pub fn max_reward(&self) -> f64 {
        self.atoms.iter().map(|a| a.reward).fold(0.0, f64::max)
    }

    /// Componentwise maximum request.
    pub fn max_quantities(&self) -> Vec<u32> {
        let mut out = vec![0; self.dim];
        for a in &self.atoms {
            for (o, &q) in out.iter_mut().zip(&a.quantities) {
                *o = (*o).max(q);
            }
        }
        out
    }

    /// Expected reward per period when every request is accepted.
    pub fn mean_reward(&self) -> f64 {
        self.atoms.iter().map(|a| a.prob * a.reward).sum()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(validation(format!(
                "dimension mismatch: got {len} components, distribution has {}",
                self.dim
            )));
        }
        Ok(())
    }

    /// `G(z) = E[(P - q . z)^+]` over arrivals.
    pub fn multi_g(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z.len())?;
        Ok(self.multi_g_unchecked(z))
    }

    pub(crate) fn multi_g_unchecked(&self, z: &[f64]) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.prob * (a.reward - a.weighted(z)).max(0.0))
            .sum()
    }

    /// Probability that some component of the request exceeds `d`.
    pub fn multi_theta_tail(&self, d: &[u64]) -> Result<f64> {
        self.check_dim(d.len())?;
        Ok(self.theta_tail_unchecked(d))
    }

    pub(crate) fn theta_tail_unchecked(&self, d: &[u64]) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.quantities.iter().zip(d).any(|(&q, &dk)| q as u64 > dk))
            .map(|a| a.prob)
            .sum()
    }

    /// Probability that a request arrives and clears the bid prices `z`.
    pub fn accept_prob(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z.len())?;
        Ok(self.accept_prob_unchecked(z))
    }

    pub(crate) fn accept_prob_unchecked(&self, z: &[f64]) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.reward >= a.weighted(z))
            .map(|a| a.prob)
            .sum()
    }

    /// Expected consumption of resource `k` per period under bid prices `z`.
    pub fn consumption_rate(&self, z: &[f64], k: usize) -> Result<f64> {
        self.check_dim(z.len())?;
        if k >= self.dim {
            return Err(validation(format!("component {k} out of range")));
        }
        Ok(self
            .atoms
            .iter()
            .filter(|a| a.reward >= a.weighted(z))
            .map(|a| a.prob * a.quantities[k] as f64)
            .sum())
    }

    /// Sum over atoms of `prob * q_k` for those with `reward >= q . lo`;
    /// bounds `|dG/dz_k|` on the orthant above `lo`.
    pub(crate) fn slope_bound(&self, lo: &[f64], k: usize) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.reward >= a.weighted(lo))
            .map(|a| a.prob * a.quantities[k] as f64)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_class() -> DemandDistribution {
        DemandDistribution::new(vec![Atom::new(2.0, 1, 0.5), Atom::new(1.0, 2, 0.5)], 0.0).unwrap()
    }

    #[test]
    fn theta_tail_examples() {
        let certain = DemandDistribution::new(vec![Atom::new(2.0, 3, 1.0)], 0.0).unwrap();
        assert_eq!(certain.theta_tail(2), 1.0);
        assert_eq!(certain.theta_tail(3), 0.0);
        let d = DemandDistribution::new(vec![Atom::new(1.0, 2, 0.3), Atom::new(1.0, 5, 0.2)], 0.5)
            .unwrap();
        assert_abs_diff_eq!(d.theta_tail(3), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(d.theta_tail(0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn loss_examples() {
        let d = two_class();
        assert_eq!(d.loss_g(d.max_price()), 0.0);
        assert_abs_diff_eq!(d.loss_g(0.0), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.loss_g(0.0), d.mean_revenue(), epsilon = 1e-15);
        // 0.5 * 1 * 0.5 + 0.5 * 2 * 0
        assert_abs_diff_eq!(d.loss_g(1.5), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn accept_prob_examples() {
        let d = DemandDistribution::new(vec![Atom::new(2.0, 1, 0.5), Atom::new(1.0, 2, 0.3)], 0.2)
            .unwrap();
        assert_abs_diff_eq!(d.accept_prob(0.0), 0.8, epsilon = 1e-15);
        assert_eq!(d.accept_prob(2.5), 0.0);
        assert_eq!(d.accept_prob(2.0), 0.5);
    }

    #[test]
    fn rejects_bad_laws() {
        assert!(DemandDistribution::new(vec![Atom::new(1.0, 1, 0.9)], 0.0).is_err());
        assert!(DemandDistribution::new(vec![Atom::new(1.0, 0, 1.0)], 0.0).is_err());
        assert!(DemandDistribution::new(vec![Atom::new(-1.0, 1, 1.0)], 0.0).is_err());
        assert!(DemandDistribution::new(vec![Atom::new(1.0, 1, 1.5)], -0.5).is_err());
    }

    #[test]
    fn merges_duplicate_atoms() {
        let d = DemandDistribution::new(
            vec![Atom::new(1.0, 1, 0.25), Atom::new(2.0, 1, 0.5), Atom::new(1.0, 1, 0.25)],
            0.0,
        )
        .unwrap();
        assert_eq!(d.atoms().len(), 2);
        assert_eq!(d.atoms()[0], Atom::new(1.0, 1, 0.5));
    }

    #[test]
    fn multi_examples() {
        let d = MultiDemandDistribution::new(2, vec![MultiAtom::new(3.0, vec![1, 1], 1.0)], 0.0)
            .unwrap();
        assert_eq!(d.multi_g(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(d.multi_g(&[0.0, 0.0]).unwrap(), 3.0);
        assert_eq!(d.multi_g(&[2.0, 1.5]).unwrap(), 0.0);
        assert!(d.multi_g(&[1.0]).is_err());

        let d = MultiDemandDistribution::new(
            2,
            vec![MultiAtom::new(1.0, vec![2, 1], 0.4), MultiAtom::new(1.0, vec![1, 3], 0.6)],
            0.0,
        )
        .unwrap();
        assert_eq!(d.multi_theta_tail(&[1, 2]).unwrap(), 1.0);
        assert_eq!(d.multi_theta_tail(&[2, 3]).unwrap(), 0.0);
        assert_eq!(d.multi_theta_tail(&[0, 0]).unwrap(), 1.0);
        assert!(d.multi_theta_tail(&[0, 0, 0]).is_err());
    }

    #[test]
    fn embedding_uses_total_revenue() {
        let m = two_class().to_multi();
        assert_eq!(m.dim(), 1);
        for z in [0.0, 0.3, 1.0, 1.5, 2.5] {
            assert_abs_diff_eq!(m.multi_g(&[z]).unwrap(), two_class().loss_g(z), epsilon = 1e-14);
        }
    }
}

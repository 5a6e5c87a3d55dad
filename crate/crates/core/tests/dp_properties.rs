use proptest::prelude::*;
use stochknap_core::{enumeration_oracle, solve_dp, Atom, DemandDistribution};

/// Distributions with 1..=3 atoms, prices on a coarse grid so ties occur.
fn small_dist() -> impl Strategy<Value = DemandDistribution> {
    (
        prop::collection::vec((0u32..=8, 1u32..=4, 1u32..=10), 1..=3),
        0u32..=6,
    )
        .prop_map(|(raw, idle)| {
            let mut atoms: Vec<(f64, u32, f64)> = Vec::new();
            for (p, q, w) in raw {
                let price = p as f64 * 0.5;
                match atoms.iter_mut().find(|a| a.0 == price && a.1 == q) {
                    Some(a) => a.2 += w as f64,
                    None => atoms.push((price, q, w as f64)),
                }
            }
            let total: f64 = atoms.iter().map(|a| a.2).sum::<f64>() + idle as f64;
            let atoms = atoms.into_iter().map(|(p, q, w)| Atom::new(p, q, w / total)).collect();
            DemandDistribution::new(atoms, idle as f64 / total).unwrap()
        })
}

fn check_table_invariants(dist: &DemandDistribution, w: usize, horizon: usize) {
    let table = solve_dp(dist, w, horizon).unwrap();
    for t in 0..=horizon {
        assert_eq!(table.get(t, 0), 0.0);
        for d in 1..=w {
            assert!(table.get(t, d) >= table.get(t, d - 1) - 1e-12, "monotone in d");
        }
        if t < horizon {
            for d in 0..=w {
                assert!(table.get(t, d) >= table.get(t + 1, d) - 1e-12, "anti-monotone in t");
            }
        }
    }
    for d in 0..=w {
        let boundary: f64 = dist
            .atoms()
            .iter()
            .filter(|a| a.quantity as usize <= d)
            .map(|a| a.prob * a.price * a.quantity as f64)
            .sum();
        assert!((table.get(horizon, d) - boundary).abs() <= 1e-15 * (1.0 + boundary));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 160, ..ProptestConfig::default() })]

    #[test]
    fn dp_matches_oracle(dist in small_dist(), w in 0usize..=5, horizon in 1usize..=6, span in 0usize..=4) {
        let t = horizon.saturating_sub(span);
        let table = solve_dp(&dist, w, horizon).unwrap();
        let oracle = enumeration_oracle(&dist, w, horizon, t).unwrap();
        prop_assert!((table.value(t, w).unwrap() - oracle).abs() <= 1e-9, "dp {} oracle {}", table.get(t, w), oracle);
    }

    #[test]
    fn table_invariants_hold(dist in small_dist(), w in 0usize..=12, horizon in 1usize..=12) {
        check_table_invariants(&dist, w, horizon);
    }

    #[test]
    fn price_scaling_is_linear(dist in small_dist(), lambda in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0, 8.0])) {
        // powers of two keep the scaling exact in floating point
        let scaled = DemandDistribution::new(
            dist.atoms().iter().map(|a| Atom::new(a.price * lambda, a.quantity, a.prob)).collect(),
            dist.no_arrival_prob(),
        ).unwrap();
        let (w, horizon) = (7, 9);
        let a = solve_dp(&dist, w, horizon).unwrap();
        let b = solve_dp(&scaled, w, horizon).unwrap();
        for t in 0..=horizon {
            for d in 0..=w {
                prop_assert_eq!(b.get(t, d), lambda * a.get(t, d));
            }
        }
        for t in 0..horizon {
            for d in 0..=w {
                for at in dist.atoms() {
                    prop_assert_eq!(
                        a.accept(t, d, at.price, at.quantity).unwrap(),
                        b.accept(t, d, at.price * lambda, at.quantity).unwrap()
                    );
                }
            }
        }
    }
}

#[test]
fn closed_form_instances() {
    let sure = DemandDistribution::new(vec![Atom::new(1.0, 1, 1.0)], 0.0).unwrap();
    let table = solve_dp(&sure, 10, 6).unwrap();
    for t in 0..=6 {
        assert_eq!(table.get(t, 10), (6 - t + 1) as f64);
    }
    let idle = DemandDistribution::empty();
    let table = solve_dp(&idle, 5, 5).unwrap();
    assert!(table.values().iter().all(|&v| v == 0.0));

    let half = DemandDistribution::new(vec![Atom::new(1.0, 1, 0.5)], 0.5).unwrap();
    let table = solve_dp(&half, 1, 2).unwrap();
    let oracle = enumeration_oracle(&half, 1, 2, 0).unwrap();
    assert!((table.get(0, 1) - oracle).abs() < 1e-12);
    assert!(table.accept(0, 1, 1.0, 1).unwrap());
}

#[test]
fn decisions_respect_feasibility_and_zero_prices() {
    let dist = DemandDistribution::new(vec![Atom::new(2.0, 1, 0.4), Atom::new(1.0, 2, 0.3)], 0.3).unwrap();
    let table = solve_dp(&dist, 6, 8).unwrap();
    for t in 0..8 {
        for d in 0..=6 {
            assert!(!table.accept(t, d, 5.0, d as u32 + 1).unwrap());
            let zero = table.accept(t, d, 0.0, 1).unwrap();
            if d >= 1 {
                assert_eq!(zero, table.get(t + 1, d - 1) >= table.get(t + 1, d));
            }
        }
    }
    assert!(table.accept(8, 1, 0.5, 1).unwrap());
    assert!(table.accept(9, 1, 1.0, 1).is_err());
    assert!(table.value(0, 7).is_err());
}

#[test]
fn oracle_refuses_oversized_instances() {
    let dist = DemandDistribution::new(
        vec![Atom::new(1.0, 1, 0.3), Atom::new(2.0, 1, 0.3), Atom::new(3.0, 2, 0.3)],
        0.1,
    )
    .unwrap();
    assert!(matches!(enumeration_oracle(&dist, 5, 40, 0), Err(stochknap_core::Error::Resource(_))));
    assert_eq!(enumeration_oracle(&dist, 0, 4, 0).unwrap(), 0.0);
}

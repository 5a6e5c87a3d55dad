use proptest::prelude::*;
use stochknap_core::{Atom, DemandDistribution, MultiAtom, MultiDemandDistribution};

fn dist() -> impl Strategy<Value = DemandDistribution> {
    (prop::collection::vec((1u32..=20, 1u32..=3, 1u32..=10), 1..=4), 0u32..=5).prop_map(|(raw, idle)| {
        let mut atoms: Vec<(f64, u32, f64)> = Vec::new();
        for (p, q, w) in raw {
            let price = p as f64 * 0.25;
            match atoms.iter_mut().find(|a| a.0 == price && a.1 == q) {
                Some(a) => a.2 += w as f64,
                None => atoms.push((price, q, w as f64)),
            }
        }
        let total: f64 = atoms.iter().map(|a| a.2).sum::<f64>() + idle as f64;
        DemandDistribution::new(
            atoms.into_iter().map(|(p, q, w)| Atom::new(p, q, w / total)).collect(),
            idle as f64 / total,
        )
        .unwrap()
    })
}

proptest! {
    #[test]
    fn loss_is_convex_and_nonincreasing(d in dist()) {
        let xs: Vec<f64> = (0..=120).map(|i| i as f64 * 0.05 - 0.5).collect();
        let g: Vec<f64> = xs.iter().map(|&x| d.loss_g(x)).collect();
        for k in 1..g.len() {
            prop_assert!(g[k] <= g[k - 1] + 1e-12);
        }
        for k in 2..g.len() {
            let (s0, s1) = (g[k - 1] - g[k - 2], g[k] - g[k - 1]);
            prop_assert!(s1 >= s0 - 1e-12, "slopes must be nondecreasing");
        }
        prop_assert_eq!(d.loss_g(d.max_price()), 0.0);
    }

    #[test]
    fn accept_prob_is_a_right_continuous_step(d in dist()) {
        let top = 1.0 - d.no_arrival_prob();
        prop_assert!((d.accept_prob(0.0) - top).abs() < 1e-12);
        prop_assert_eq!(d.accept_prob(d.max_price() + 1e-9), 0.0);
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let a = d.accept_prob(i as f64 * 0.06);
            prop_assert!((0.0..=top + 1e-12).contains(&a));
            prop_assert!(a <= prev);
            prev = a;
        }
        for at in d.atoms() {
            prop_assert!(d.accept_prob(at.price) >= at.prob);
        }
    }

    #[test]
    fn theta_tail_is_a_decreasing_step(d in dist()) {
        let mut prev = d.theta_tail(0);
        prop_assert!((prev - d.arrival_prob()).abs() < 1e-12);
        for k in 1..=5 {
            let v = d.theta_tail(k);
            prop_assert!(v <= prev);
            prev = v;
        }
        prop_assert_eq!(d.theta_tail(d.max_quantity() as u64), 0.0);
    }

    #[test]
    fn unit_demand_slope_equals_accept_prob(d in dist(), i in 0usize..40) {
        let unit = DemandDistribution::new(
            d.atoms().iter().map(|a| Atom::new(a.price, 1, a.prob)).fold(Vec::<Atom>::new(), |mut v, a| {
                match v.iter_mut().find(|b| b.price == a.price) {
                    Some(b) => b.prob += a.prob,
                    None => v.push(a),
                }
                v
            }),
            d.no_arrival_prob(),
        ).unwrap();
        // off-atom sample point: prices are multiples of 0.25
        let x = i as f64 * 0.125 + 0.0625;
        let h = 1e-6;
        let slope = (unit.loss_g(x - h) - unit.loss_g(x + h)) / (2.0 * h);
        prop_assert!((slope - unit.accept_prob(x)).abs() < 1e-8);
    }
}

#[test]
fn documented_values() {
    let d = DemandDistribution::new(vec![Atom::new(2.0, 3, 1.0)], 0.0).unwrap();
    assert_eq!(d.theta_tail(2), 1.0);
    assert_eq!(d.theta_tail(3), 0.0);
    let d = DemandDistribution::new(vec![Atom::new(1.0, 2, 0.3), Atom::new(1.0, 5, 0.2)], 0.5).unwrap();
    assert!((d.theta_tail(3) - 0.2).abs() < 1e-15);
    let d = DemandDistribution::new(vec![Atom::new(2.0, 1, 0.5), Atom::new(1.0, 2, 0.5)], 0.0).unwrap();
    assert_eq!(d.loss_g(0.0), 2.0);
    assert_eq!(d.loss_g(1.5), 0.25);
    let d = DemandDistribution::new(vec![Atom::new(2.0, 1, 0.5), Atom::new(1.0, 2, 0.3)], 0.2).unwrap();
    assert_eq!(d.accept_prob(2.0), 0.5);

    let m = MultiDemandDistribution::new(2, vec![MultiAtom::new(3.0, vec![1, 1], 1.0)], 0.0).unwrap();
    assert_eq!(m.multi_g(&[1.0, 1.0]).unwrap(), 1.0);
    assert_eq!(m.multi_g(&[2.0, 1.5]).unwrap(), 0.0);
    let m = MultiDemandDistribution::new(
        2,
        vec![MultiAtom::new(1.0, vec![2, 1], 0.4), MultiAtom::new(1.0, vec![1, 3], 0.6)],
        0.0,
    )
    .unwrap();
    assert_eq!(m.multi_theta_tail(&[1, 2]).unwrap(), 1.0);
    assert_eq!(m.multi_theta_tail(&[2, 3]).unwrap(), 0.0);
    assert!(m.multi_g(&[0.0]).is_err());
}

#[test]
fn invalid_laws_are_rejected() {
    assert!(DemandDistribution::new(vec![Atom::new(1.0, 1, 0.5)], 0.4).is_err());
    assert!(DemandDistribution::new(vec![Atom::new(-1.0, 1, 0.5)], 0.5).is_err());
    assert!(DemandDistribution::new(vec![Atom::new(1.0, 0, 0.5)], 0.5).is_err());
    assert!(MultiDemandDistribution::new(2, vec![MultiAtom::new(1.0, vec![1, 0], 1.0)], 0.0).is_err());
    assert!(MultiDemandDistribution::new(2, vec![MultiAtom::new(1.0, vec![1], 1.0)], 0.0).is_err());
}

use stochknap_core::diffusion::{euler_maruyama, SdeConfig};
use stochknap_core::sim::{simulate_with, Recording};
use stochknap_core::stats::{mean_var, std_error};
use stochknap_core::{
    fluctuation_compare, simulate, simulate_diffusion, solve_center_ode, solve_dp, solve_grid, Atom,
    CoefficientMode, DemandDistribution, GridSpec,
};

fn bernoulli() -> DemandDistribution {
    DemandDistribution::new(vec![Atom::new(1.0, 1, 0.5)], 0.5).unwrap()
}

fn two_price() -> DemandDistribution {
    DemandDistribution::new(vec![Atom::new(2.0, 1, 0.3), Atom::new(1.0, 1, 0.5)], 0.2).unwrap()
}

const DT: f64 = 1.0 / 2048.0;

#[test]
fn center_matches_monte_carlo_supply() {
    let n = 200usize;
    for (name, dist, d) in [("bernoulli", bernoulli(), 1.5), ("bernoulli-binding", bernoulli(), 0.3), ("two-price", two_price(), 1.5)] {
        let field = solve_grid(&dist, |_| 0.0, GridSpec::new(1.0, 1.5, 600, 900)).unwrap();
        let center = solve_center_ode(&field, &dist, CoefficientMode::AcceptProb, d, (0.0, 1.0), DT).unwrap();
        assert!(center.s.windows(2).all(|s| s[1] >= s[0]));
        assert!(center.s.iter().all(|&s| s <= d));
        let w = (d * n as f64).round() as usize;
        let table = solve_dp(&dist, w, n).unwrap();
        let ens = simulate_with(&dist, &table, 0, w, 20_000, 1, Recording::Every(n / 20)).unwrap();
        for r in [0.1, 0.25, 0.5, 0.75, 1.0] {
            let col = ens.column((r * n as f64).round() as usize).unwrap();
            let mc = mean_var(&ens.supplied_at(col)).0 / n as f64;
            let s = center.s_at(r).unwrap();
            assert!((mc - s).abs() <= 0.02 * s, "{name} t={r}: mc {mc} ode {s}");
        }
    }
}

#[test]
fn brownian_sanity() {
    let cfg = SdeConfig::new((0.0, 1.0), 10_000, 3);
    let zero = euler_maruyama(|_| 0.0, |_| 0.0, |_| 1.0, &cfg).unwrap();
    assert!(zero.y.iter().chain(&zero.z).all(|&v| v == 0.0));
    let bm = euler_maruyama(|_| 0.0, |_| 1.0, |_| 1.0, &SdeConfig { stride: 256, ..cfg }).unwrap();
    let var = mean_var(&bm.terminal_y()).1;
    assert!((var - 1.0).abs() < 0.05, "{var}");
    assert!(bm.y_at(0).iter().all(|&y| y == 0.0));
}

#[test]
fn martingale_and_variance_additivity() {
    let dist = bernoulli();
    let field = solve_grid(&dist, |_| 0.0, GridSpec::new(1.0, 1.5, 200, 300)).unwrap();
    let center = solve_center_ode(&field, &dist, CoefficientMode::AcceptProb, 1.5, (0.0, 1.0), DT).unwrap();
    let n_paths = 10_000;
    let sde = simulate_diffusion(&center, n_paths, 8, 128).unwrap();
    for col in 0..sde.times.len() {
        let y = sde.y_at(col);
        assert!(mean_var(&y).0.abs() <= 3.0 * std_error(&y) + 1e-15);
    }
    for col in 1..sde.times.len() {
        let t = sde.times[col];
        let var = mean_var(&sde.y_at(col)).1;
        let exact = center.integrated_variance(t).unwrap();
        let width = 4.0 * exact * (2.0 / n_paths as f64).sqrt();
        assert!((var - exact).abs() <= width, "t={t}: {var} vs {exact}");
        assert!((exact - 0.25 * t).abs() < 1e-12);
    }
}

#[test]
fn halving_dt_is_stable() {
    let dist = two_price();
    let field = solve_grid(&dist, |_| 0.0, GridSpec::new(1.0, 1.0, 300, 300)).unwrap();
    let n_paths = 10_000;
    let terminal = |dt: f64| {
        let c = solve_center_ode(&field, &dist, CoefficientMode::AcceptProb, 0.5, (0.0, 1.0), dt).unwrap();
        mean_var(&simulate_diffusion(&c, n_paths, 21, 1 << 20).unwrap().terminal_y()).1
    };
    let (coarse, fine) = (terminal(1.0 / 1024.0), terminal(1.0 / 2048.0));
    let width = 1.96 * coarse * (2.0 / n_paths as f64).sqrt() * 2.0;
    assert!((coarse - fine).abs() < width, "{coarse} vs {fine}");
}

#[test]
fn accept_all_fluctuations_match_the_sde() {
    let dist = bernoulli();
    let n = 200usize;
    let field = solve_grid(&dist, |_| 0.0, GridSpec::new(1.0, 1.5, 200, 300)).unwrap();
    let center = solve_center_ode(&field, &dist, CoefficientMode::AcceptProb, 1.5, (0.0, 1.0), DT).unwrap();
    let sde = simulate_diffusion(&center, 10_000, 40, 64).unwrap();
    let w = 300;
    let table = solve_dp(&dist, w, n).unwrap();
    let ens = simulate(&dist, &table, 0, w, 10_000, 41).unwrap();
    let report = fluctuation_compare(&dist, &ens, &sde, n as f64, &[0.25, 0.5, 1.0], false).unwrap();
    for row in &report.rows {
        let ratio = row.var_empirical / row.var_sde;
        assert!((0.85..=1.15).contains(&ratio), "{row:?}");
        assert!((row.var_sde - 0.25 * row.t).abs() <= 0.1 * 0.25 * row.t, "{row:?}");
    }
    let last = report.rows.last().unwrap();
    assert!(last.ks_stat < last.ks_crit, "{last:?}");
    assert!(!report.experimental && !report.clamped);
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("t,var_empirical,var_sde,ks_stat,ks_crit\n"));
}

#[test]
fn degenerate_and_batch_cases() {
    // certain arrivals at a price that always clears: sigma = 0
    let sure = DemandDistribution::new(vec![Atom::new(1.0, 1, 1.0)], 0.0).unwrap();
    let n = 50usize;
    let field = solve_grid(&sure, |_| 0.0, GridSpec::new(1.0, 1.5, 100, 150)).unwrap();
    let center = solve_center_ode(&field, &sure, CoefficientMode::AcceptProb, 1.5, (0.0, 1.0), DT).unwrap();
    assert!((center.s_at(1.0).unwrap() - 1.0).abs() < 1e-12);
    let sde = simulate_diffusion(&center, 200, 1, 256).unwrap();
    let table = solve_dp(&sure, 75, n).unwrap();
    let ens = simulate(&sure, &table, 0, 75, 200, 2).unwrap();
    let report = fluctuation_compare(&sure, &ens, &sde, n as f64, &[0.5, 1.0], false).unwrap();
    assert!(report.rows.iter().all(|r| r.var_empirical == 0.0 && r.var_sde == 0.0));

    let batch = DemandDistribution::new(vec![Atom::new(1.0, 2, 0.5)], 0.5).unwrap();
    let field = solve_grid(&batch, |_| 0.0, GridSpec::new(1.0, 1.5, 100, 150)).unwrap();
    let center = solve_center_ode(&field, &batch, CoefficientMode::AcceptProb, 1.5, (0.0, 1.0), DT).unwrap();
    let sde = simulate_diffusion(&center, 200, 1, 256).unwrap();
    let table = solve_dp(&batch, 75, n).unwrap();
    let ens = simulate(&batch, &table, 0, 75, 200, 2).unwrap();
    assert!(fluctuation_compare(&batch, &ens, &sde, n as f64, &[1.0], false).is_err());
    let report = fluctuation_compare(&batch, &ens, &sde, n as f64, &[1.0], true).unwrap();
    assert!(report.experimental);
    assert!(report.summary_text().starts_with("EXPERIMENTAL"));
}

#[test]
fn verbatim_mode_clamps_and_warns() {
    let rich = DemandDistribution::new(vec![Atom::new(4.0, 1, 0.5)], 0.5).unwrap();
    let field = solve_grid(&rich, |_| 0.0, GridSpec::new(1.0, 1.5, 200, 300)).unwrap();
    let center = solve_center_ode(&field, &rich, CoefficientMode::VerbatimLoss, 1.5, (0.0, 1.0), DT).unwrap();
    assert!(center.clamped);
    let sde = simulate_diffusion(&center, 100, 1, 512).unwrap();
    assert!(sde.clamped);
}

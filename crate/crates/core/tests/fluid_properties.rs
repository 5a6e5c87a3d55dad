use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stochknap_core::parametric::pde_residual_at;
use stochknap_core::{
    monge_ampere_residual, pde_residual, scaled_dp_error, solve_dp, solve_grid, Atom, DemandDistribution,
    ExponentialLoss, FluidField, GridSpec, ParametricSolution, TriangularPriceLoss,
};

fn bernoulli() -> DemandDistribution {
    DemandDistribution::new(vec![Atom::new(1.0, 1, 0.5)], 0.5).unwrap()
}

fn smooth_terminal(y: f64) -> f64 {
    y - y * y / 4.0
}

fn triangular_solution() -> ParametricSolution {
    let f = |xi: f64| {
        let s = (-xi).max(0.0).sqrt();
        2.0 * s + s * s
    };
    ParametricSolution::triangular(1.0, f, (-1.0, 0.0), (1.0, 0.0, 0.0))
}

#[test]
fn accept_all_region_is_linear_in_time() {
    let dist = DemandDistribution::new(vec![Atom::new(2.0, 1, 0.3), Atom::new(1.0, 2, 0.5)], 0.2).unwrap();
    let epq = 0.3 * 2.0 + 0.5 * 2.0;
    let big_y = 2.0;
    let field = solve_grid(&dist, |_| 0.0, GridSpec::new(1.0, big_y, 200, 200)).unwrap();
    let q_max = 2.0;
    for i in 0..=200 {
        for j in 0..=200 {
            let (x, y) = (field.x(i), field.y(j));
            if y >= (1.0 - x) * q_max {
                assert!((field.at(i, j) - (1.0 - x) * epq).abs() < 1e-6, "({x}, {y})");
            }
        }
    }
}

#[test]
fn field_is_monotone_and_reproduces_boundaries() {
    let dist = DemandDistribution::new(vec![Atom::new(2.0, 1, 0.3), Atom::new(1.0, 1, 0.5)], 0.2).unwrap();
    let h = |y: f64| 0.5 * y.min(0.4);
    let field = solve_grid(&dist, h, GridSpec::new(1.0, 1.0, 120, 120)).unwrap();
    for i in 0..=120 {
        assert_eq!(field.at(i, 0), 0.0);
        for j in 0..=120 {
            if j > 0 {
                assert!(field.at(i, j) >= field.at(i, j - 1) - 1e-12);
            }
            if i > 0 {
                assert!(field.at(i - 1, j) >= field.at(i, j) - 1e-12);
            }
        }
    }
    for j in 0..=120 {
        assert_eq!(field.at(120, j), h(field.y(j)));
    }
}

#[test]
fn invalid_inputs_are_refused() {
    let dist = bernoulli();
    assert!(matches!(
        solve_grid(&dist, |y| -y, GridSpec::new(1.0, 1.0, 20, 20)),
        Err(stochknap_core::Error::Validation(_))
    ));
    let err = solve_grid(&dist, |_| 0.0, GridSpec::new(1.0, 1.0, 5, 200)).unwrap_err();
    assert!(err.to_string().contains("nx >="), "{err}");
}

#[test]
fn scaled_dp_error_ladder_is_monotone() {
    let dist = bernoulli();
    let field = solve_grid(&dist, |_| 0.0, GridSpec::new(1.0, 1.0, 400, 400)).unwrap();
    let errs: Vec<f64> = [10usize, 20, 40]
        .iter()
        .map(|&n| scaled_dp_error(&solve_dp(&dist, n, n).unwrap(), &field, n).unwrap())
        .collect();
    assert!(errs.windows(2).all(|e| e[1] <= e[0]), "{errs:?}");
    assert!(errs[2] < 0.5 * errs[0], "{errs:?}");
}

#[test]
fn residuals_shrink_under_refinement() {
    let g = TriangularPriceLoss::new(1.0);
    let mut pde = Vec::new();
    let mut ma = Vec::new();
    for n in [40usize, 80, 160] {
        let field = solve_grid(&g, smooth_terminal, GridSpec::new(1.0, 1.0, n, n)).unwrap();
        pde.push(pde_residual(&field, &g).max_abs);
        ma.push(monge_ampere_residual(&field).unwrap().normalized);
    }
    assert!(pde.windows(2).all(|e| e[1] < e[0]), "{pde:?}");
    assert!(ma.windows(2).all(|e| e[1] < e[0]), "{ma:?}");
    assert!(ma[2] <= 0.05, "{ma:?}");
}

#[test]
fn monge_ampere_manufactured_fields() {
    let affine = FluidField::from_fn(GridSpec::new(1.0, 2.0, 10, 10), |x, y| 3.0 * x - y + 1.0).unwrap();
    let res = monge_ampere_residual(&affine).unwrap();
    assert_eq!(res.normalized, 0.0);
    assert!(res.max_abs < 1e-20);
    let xy = FluidField::from_fn(GridSpec::new(1.0, 1.0, 10, 10), |x, y| x * y).unwrap();
    assert!((monge_ampere_residual(&xy).unwrap().normalized - 1.0).abs() < 1e-9);
    let tiny = FluidField::from_fn(GridSpec::new(1.0, 1.0, 4, 4), |x, y| x * y).unwrap();
    assert!(monge_ampere_residual(&tiny).is_err());
}

#[test]
fn parametric_fields_solve_the_pde() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let exp = ParametricSolution::exponential(1.0, 2.0, |xi| 1.0 - xi, (-1.9, -0.05), (0.0, 1.5, 0.0));
    let g_exp = ExponentialLoss::new(1.0, 2.0);
    let tri = triangular_solution();
    let g_tri = TriangularPriceLoss::new(1.0);
    for _ in 0..100 {
        let x: f64 = rng.random_range(0.1..0.9);
        let xi: f64 = rng.random_range(-1.8..-0.1);
        let y = 1.0 + xi * (x - 1.0);
        assert!(pde_residual_at(&exp, &g_exp, x, y).unwrap() <= 1e-8);

        let (x, y): (f64, f64) = (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95));
        assert!(pde_residual_at(&tri, &g_tri, x, y).unwrap() <= 1e-8);
    }
}

#[test]
fn grid_agrees_with_parametric_solution() {
    let sol = triangular_solution();
    let g = TriangularPriceLoss::new(1.0);
    for n in [100usize, 200] {
        let field = solve_grid(&g, smooth_terminal, GridSpec::new(1.0, 1.0, n, n)).unwrap();
        let tol = 0.05 / n as f64;
        for i in 0..=10 {
            for j in 0..=10 {
                let (x, y) = (i as f64 / 10.0, j as f64 / 10.0);
                let exact = sol.evaluate(x, y).unwrap().0;
                let grid = field.u_at(x, y).unwrap();
                assert!((exact - grid).abs() <= tol, "n={n} ({x}, {y}): {exact} vs {grid}");
            }
        }
    }
}

#[test]
fn binary_and_csv_round_trip() {
    let field = solve_grid(&bernoulli(), |_| 0.0, GridSpec::new(1.0, 1.0, 30, 20)).unwrap();
    let mut buf = Vec::new();
    field.write_binary(&mut buf).unwrap();
    assert_eq!(FluidField::read_binary(buf.as_slice()).unwrap(), field);
    let mut csv = Vec::new();
    field.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("x,y,u,u_x,u_y\n"));
    assert_eq!(text.lines().count(), 1 + 31 * 21);
}

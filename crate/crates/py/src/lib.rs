//! Python bindings: demand laws, the exact DP, Monte Carlo simulation, the
//! fluid PDE, the center ODE with its diffusion, and the multi-resource
//! solvers.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use stochknap_core as core;
use stochknap_core::diffusion::CoefficientMode;

fn py_err(e: core::Error) -> PyErr {
    match e {
        core::Error::Validation(m) | core::Error::Range(m) => PyValueError::new_err(m),
        core::Error::Resource(m) => PyRuntimeError::new_err(format!("resource limit: {m}")),
        core::Error::Numerical(m) => PyRuntimeError::new_err(m),
        core::Error::Io(m) => PyOSError::new_err(m),
    }
}

fn coefficient_mode(mode: &str) -> PyResult<CoefficientMode> {
    match mode {
        "accept-prob" => Ok(CoefficientMode::AcceptProb),
        "verbatim-g" => Ok(CoefficientMode::VerbatimLoss),
        other => Err(PyValueError::new_err(format!("mode must be 'accept-prob' or 'verbatim-g', got {other:?}"))),
    }
}

/// Discrete law of one period's request: atoms `(price, quantity, prob)`
/// plus the probability that nothing arrives.
#[pyclass(name = "DemandDistribution", module = "stochknap", frozen)]
struct PyDemand(core::DemandDistribution);

#[pymethods]
impl PyDemand {
    #[new]
    #[pyo3(signature = (atoms, no_arrival))]
    fn new(atoms: Vec<(f64, u32, f64)>, no_arrival: f64) -> PyResult<Self> {
        let atoms = atoms.into_iter().map(|(p, q, w)| core::Atom::new(p, q, w)).collect();
        core::DemandDistribution::new(atoms, no_arrival).map(Self).map_err(py_err)
    }

    #[getter]
    fn atoms(&self) -> Vec<(f64, u32, f64)> {
        self.0.atoms().iter().map(|a| (a.price, a.quantity, a.prob)).collect()
    }

    #[getter]
    fn no_arrival(&self) -> f64 {
        self.0.no_arrival_prob()
    }

    /// Expected quantity-weighted price excess `g(x) = E[Q (P - x)+]`.
    fn loss(&self, x: f64) -> f64 {
        self.0.loss_g(x)
    }

    fn accept_prob(&self, x: f64) -> f64 {
        self.0.accept_prob(x)
    }

    fn mean_revenue(&self) -> f64 {
        self.0.mean_revenue()
    }

    fn __repr__(&self) -> String {
        format!("DemandDistribution(atoms={:?}, no_arrival={})", self.atoms(), self.no_arrival())
    }
}

/// Optimal values `V(t, d)` for `t = 0..=horizon`, `d = 0..=capacity`.
#[pyclass(name = "ValueTable", module = "stochknap", frozen)]
struct PyValueTable(core::ValueTable);

#[pymethods]
impl PyValueTable {
    #[getter]
    fn horizon(&self) -> usize {
        self.0.horizon()
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.0.capacity()
    }

    fn value(&self, t: usize, d: usize) -> PyResult<f64> {
        self.0.value(t, d).map_err(py_err)
    }

    /// Whether the optimal policy accepts `(price, quantity)` at `(t, d)`.
    fn accept(&self, t: usize, d: usize, price: f64, quantity: u32) -> PyResult<bool> {
        self.0.accept(t, d, price, quantity).map_err(py_err)
    }

    /// Rows `[V(t, 0), ..., V(t, W)]` for every period.
    fn to_list(&self) -> Vec<Vec<f64>> {
        self.0.values().chunks(self.0.capacity() + 1).map(<[f64]>::to_vec).collect()
    }
}

#[pyfunction]
fn solve_dp(dist: &PyDemand, capacity: usize, horizon: usize) -> PyResult<PyValueTable> {
    core::solve_dp(&dist.0, capacity, horizon).map(PyValueTable).map_err(py_err)
}

/// Brute-force expectimax over every arrival sequence from period `t`.
#[pyfunction]
fn enumeration_oracle(dist: &PyDemand, capacity: usize, horizon: usize, t: usize) -> PyResult<f64> {
    core::enumeration_oracle(&dist.0, capacity, horizon, t).map_err(py_err)
}

/// Simulated optimal-policy paths.
#[pyclass(name = "PathEnsemble", module = "stochknap", frozen)]
struct PyEnsemble(core::PathEnsemble);

#[pymethods]
impl PyEnsemble {
    #[getter]
    fn n_paths(&self) -> usize {
        self.0.n_paths
    }

    #[getter]
    fn checkpoints(&self) -> Vec<usize> {
        self.0.checkpoints.clone()
    }

    fn terminal_rewards(&self) -> Vec<f64> {
        self.0.terminal_rewards()
    }

    /// Units supplied by each path up to the `col`-th checkpoint.
    fn supplied_at(&self, col: usize) -> PyResult<Vec<f64>> {
        if col >= self.0.checkpoints.len() {
            return Err(PyValueError::new_err(format!("column {col} out of range")));
        }
        Ok(self.0.supplied_at(col))
    }
}

#[pyfunction]
#[pyo3(signature = (dist, table, t, d, n_paths, seed))]
fn simulate(dist: &PyDemand, table: &PyValueTable, t: usize, d: usize, n_paths: usize, seed: u64) -> PyResult<PyEnsemble> {
    core::simulate(&dist.0, &table.0, t, d, n_paths, seed).map(PyEnsemble).map_err(py_err)
}

/// `(n, mean, Var/n, ci_lo, ci_hi)`
type VarianceTuple = (usize, f64, f64, f64, f64);

/// One tuple per rung of the scale ladder.
#[pyfunction]
#[pyo3(signature = (dist, t, d, horizon, scales, n_paths, seed))]
fn variance_scaling(
    dist: &PyDemand,
    t: f64,
    d: f64,
    horizon: f64,
    scales: Vec<usize>,
    n_paths: usize,
    seed: u64,
) -> PyResult<Vec<VarianceTuple>> {
    let rows = core::variance_scaling(&dist.0, t, d, horizon, &scales, n_paths, seed).map_err(py_err)?;
    Ok(rows.into_iter().map(|r| (r.n, r.mean, r.ratio, r.ci_lo, r.ci_hi)).collect())
}

/// Upwind solution of `u_x + g(u_y) = 0` with zero terminal data.
#[pyclass(name = "FluidField", module = "stochknap", frozen)]
struct PyField(core::FluidField);

#[pymethods]
impl PyField {
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.grid.nx + 1, self.0.grid.ny + 1)
    }

    #[getter]
    fn extent(&self) -> (f64, f64) {
        (self.0.grid.x_max, self.0.grid.y_max)
    }

    fn u(&self, x: f64, y: f64) -> PyResult<f64> {
        self.0.u_at(x, y).map_err(py_err)
    }

    fn u_y(&self, x: f64, y: f64) -> PyResult<f64> {
        self.0.u_y_at(x, y).map_err(py_err)
    }

    /// Nodal values, row `i` holding `u(x_i, y_0..y_ny)`.
    fn values(&self) -> Vec<Vec<f64>> {
        self.0.u.chunks(self.0.grid.ny + 1).map(<[f64]>::to_vec).collect()
    }

    /// Largest interior `|u_x + g(u_y)|`.
    fn pde_residual(&self, dist: &PyDemand) -> f64 {
        core::pde_residual(&self.0, &dist.0).max_abs
    }

    /// Normalized `|u_xx u_yy - u_xy^2|`.
    fn monge_ampere_residual(&self) -> PyResult<f64> {
        core::monge_ampere_residual(&self.0).map(|r| r.normalized).map_err(py_err)
    }

    /// `max |V(t, d)/n - u(t/n, d/n)|` over the table's lattice.
    fn scaled_dp_error(&self, table: &PyValueTable, n: usize) -> PyResult<f64> {
        core::scaled_dp_error(&table.0, &self.0, n).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (dist, x_max, y_max, nx, ny))]
fn solve_grid(dist: &PyDemand, x_max: f64, y_max: f64, nx: usize, ny: usize) -> PyResult<PyField> {
    core::solve_grid(&dist.0, |_| 0.0, core::GridSpec::new(x_max, y_max, nx, ny)).map(PyField).map_err(py_err)
}

/// Fluid center `s(t)` and diffusion coefficient along it.
#[pyclass(name = "CenterPath", module = "stochknap", frozen)]
struct PyCenter(core::CenterPath);

#[pymethods]
impl PyCenter {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times.clone()
    }

    #[getter]
    fn s(&self) -> Vec<f64> {
        self.0.s.clone()
    }

    #[getter]
    fn variance(&self) -> Vec<f64> {
        self.0.variance.clone()
    }

    #[getter]
    fn clamped(&self) -> bool {
        self.0.clamped
    }

    fn s_at(&self, t: f64) -> PyResult<f64> {
        self.0.s_at(t).map_err(py_err)
    }

    fn integrated_variance(&self, t: f64) -> PyResult<f64> {
        self.0.integrated_variance(t).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (field, dist, d, t_end, dt, mode = "accept-prob"))]
fn solve_center_ode(field: &PyField, dist: &PyDemand, d: f64, t_end: f64, dt: f64, mode: &str) -> PyResult<PyCenter> {
    core::solve_center_ode(&field.0, &dist.0, coefficient_mode(mode)?, d, (0.0, t_end), dt)
        .map(PyCenter)
        .map_err(py_err)
}

/// Euler-Maruyama paths of the limiting diffusion.
#[pyclass(name = "SdePathSet", module = "stochknap", frozen)]
struct PySde(core::SdePathSet);

#[pymethods]
impl PySde {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times.clone()
    }

    #[getter]
    fn experimental(&self) -> bool {
        self.0.experimental
    }

    fn y_at(&self, col: usize) -> PyResult<Vec<f64>> {
        if col >= self.0.times.len() {
            return Err(PyValueError::new_err(format!("column {col} out of range")));
        }
        Ok(self.0.y_at(col))
    }

    fn terminal_y(&self) -> Vec<f64> {
        self.0.terminal_y()
    }
}

#[pyfunction]
#[pyo3(signature = (center, n_paths, seed, stride = 1))]
fn simulate_diffusion(center: &PyCenter, n_paths: usize, seed: u64, stride: usize) -> PyResult<PySde> {
    core::simulate_diffusion(&center.0, n_paths, seed, stride).map(PySde).map_err(py_err)
}

/// Multi-resource law: atoms `(reward, [q_1, ..., q_m], prob)`.
#[pyclass(name = "MultiDemandDistribution", module = "stochknap", frozen)]
struct PyMultiDemand(core::MultiDemandDistribution);

#[pymethods]
impl PyMultiDemand {
    #[new]
    fn new(dim: usize, atoms: Vec<(f64, Vec<u32>, f64)>, no_arrival: f64) -> PyResult<Self> {
        let atoms = atoms.into_iter().map(|(r, q, w)| core::MultiAtom::new(r, q, w)).collect();
        core::MultiDemandDistribution::new(dim, atoms, no_arrival).map(Self).map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }
}

#[pyclass(name = "MultiValueTable", module = "stochknap", frozen)]
struct PyMultiTable(core::MultiValueTable);

#[pymethods]
impl PyMultiTable {
    #[getter]
    fn horizon(&self) -> usize {
        self.0.horizon()
    }

    #[getter]
    fn capacities(&self) -> Vec<usize> {
        self.0.capacities().to_vec()
    }

    fn value(&self, t: usize, d: Vec<usize>) -> PyResult<f64> {
        self.0.value(t, &d).map_err(py_err)
    }
}

#[pyfunction]
fn solve_dp_multi(dist: &PyMultiDemand, capacities: Vec<usize>, horizon: usize) -> PyResult<PyMultiTable> {
    core::solve_dp_multi(&dist.0, &capacities, horizon).map(PyMultiTable).map_err(py_err)
}

#[pyfunction]
fn multi_enumeration_oracle(dist: &PyMultiDemand, capacities: Vec<usize>, horizon: usize, t: usize) -> PyResult<f64> {
    core::multi_enumeration_oracle(&dist.0, &capacities, horizon, t).map_err(py_err)
}

/// `[x_max, Y_1, ..., Y_m]` extents and `[time, cells_1, ..., cells_m]`
/// cell counts; returns the field's `max |V/n - u|` at each scale in
/// `scales` when given.
#[pyclass(name = "MultiFluidField", module = "stochknap", frozen)]
struct PyMultiField(core::MultiFluidField);

#[pymethods]
impl PyMultiField {
    fn u(&self, point: Vec<f64>) -> PyResult<f64> {
        self.0.u_at(&point).map_err(py_err)
    }

    fn gradient(&self, point: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.grad_at(&point).map_err(py_err)
    }

    fn scaled_dp_error(&self, table: &PyMultiTable, n: usize) -> PyResult<f64> {
        core::multidim::scaled_dp_error_multi(&table.0, &self.0, n).map_err(py_err)
    }
}

#[pyfunction]
fn solve_fluid_multi(dist: &PyMultiDemand, extents: Vec<f64>, cells: Vec<usize>) -> PyResult<PyMultiField> {
    core::solve_fluid_multi(&dist.0, |_: &[f64]| 0.0, core::MultiGridSpec::new(extents, cells))
        .map(PyMultiField)
        .map_err(py_err)
}

#[pymodule]
fn stochknap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDemand>()?;
    m.add_class::<PyValueTable>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyCenter>()?;
    m.add_class::<PySde>()?;
    m.add_class::<PyMultiDemand>()?;
    m.add_class::<PyMultiTable>()?;
    m.add_class::<PyMultiField>()?;
    m.add_function(wrap_pyfunction!(solve_dp, m)?)?;
    m.add_function(wrap_pyfunction!(enumeration_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(variance_scaling, m)?)?;
    m.add_function(wrap_pyfunction!(solve_grid, m)?)?;
    m.add_function(wrap_pyfunction!(solve_center_ode, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_diffusion, m)?)?;
    m.add_function(wrap_pyfunction!(solve_dp_multi, m)?)?;
    m.add_function(wrap_pyfunction!(multi_enumeration_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(solve_fluid_multi, m)?)?;
    Ok(())
}

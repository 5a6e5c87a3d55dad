//! Stochastic knapsack laboratory: exact dynamic programming, Monte Carlo
//! evaluation of the optimal policy, and the fluid (first-order PDE) and
//! diffusion (SDE) approximations of the value function and the supply
//! process, in one and several resource dimensions.

pub mod demand;
pub mod diffusion;
pub mod dp;
pub mod error;
pub mod fluid;
pub mod gridio;
pub mod interp;
pub mod loss;
pub mod multidim;
pub mod parametric;
pub mod rng;
pub mod sim;
pub mod stats;

pub use demand::{Atom, DemandDistribution, MultiAtom, MultiDemandDistribution};
pub use dp::{enumeration_oracle, solve_dp, PolicyDecision, ValueTable};
pub use error::{Error, Result};
pub use diffusion::{
    fluctuation_compare, simulate_diffusion, solve_center_ode, CenterPath, CoefficientMode, FluctuationReport,
    SdePathSet,
};
pub use fluid::{monge_ampere_residual, pde_residual, scaled_dp_error, solve_grid, FluidField, GridSpec};
pub use gridio::GridData;
pub use multidim::{
    evaluate_parametric_multi, hessian_det_residual, multi_enumeration_oracle, multi_sde, solve_centers_multi,
    solve_dp_multi, solve_fluid_multi, MultiFluidField, MultiGridSpec, MultiParametric, MultiValueTable,
};
pub use parametric::{evaluate_parametric, ParametricSolution};
pub use loss::{ExponentialLoss, Loss, MultiLoss, TriangularPriceLoss};
pub use sim::{scaled_fluctuations, simulate, simulate_with, variance_scaling, PathEnsemble, Recording};

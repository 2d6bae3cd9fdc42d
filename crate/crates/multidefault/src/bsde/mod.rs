//! BSDEs `-dY = g(t, Y, Z, K) dt + dD - Z dW - sum_i K^i dM^i`, `Y_T = eta`.

pub mod checks;
pub mod driver;
pub mod explicit;
pub mod lsmc;
pub mod picard;

pub use checks::{check_apriori, check_comparison, check_jump_condition, AprioriParams, ComparisonReport, EstimateReport, Problem};
pub use driver::{coefficient_sup, probe_admissibility, require_admissible, Driver, FnDriver, LinearDriver, ProbeReport};
pub use explicit::{solve_linear_explicit, ExplicitSolution, OptionalForm};
pub use lsmc::{backward_sweep, solve_backward_lsmc, BsdeSolution, KEstimator, LsmcOptions, StratumFit};
pub use picard::{contraction_weights, solve_picard, PicardTrace};

//! Testing-guided multi-objective Bayesian optimization with certified risk control.
//!
//! The pipeline has two stages. An optimization stage runs Bayesian
//! optimization on validation data, steering proposals into a region of the
//! objective space where configurations are likely to pass a statistical test
//! while still being efficient on a single free objective. A testing stage then
//! filters the evaluated configurations to their Pareto front, orders them by
//! validation p-values and certifies them on calibration data with
//! fixed-sequence testing, so that the returned configuration satisfies every
//! risk limit with probability at least `1 - delta`.
//!
//! Module map:
//!
//! - [`types`]: search space, configurations, risk specification, loss records
//! - [`stats`]: Hoeffding and Hoeffding-Bentkus p-values, `alpha_max`, region of interest
//! - [`pareto`]: dominance, Pareto archive, exact and Monte Carlo hypervolume
//! - [`surrogate`]: Gaussian-process regression with ARD squared-exponential kernel
//! - [`guided_bo`]: the guided optimization loop
//! - [`selection`]: Pareto filtering, ordering, fixed-sequence testing, final choice
//! - [`objectives`]: synthetic, table-backed and subprocess objective providers
//! - [`experiment`]: multi-trial experiments, baselines, FWER studies, budget sweeps

pub mod experiment;
pub mod guided_bo;
pub mod objectives;
pub mod pareto;
pub mod seed;
pub mod selection;
pub mod stats;
pub mod surrogate;
pub mod types;

pub use guided_bo::{run_bo, BoConfig, BoError, BoOutcome, IterationLog};
pub use objectives::{builtin_problems, Objective, ObjectiveError, ObjectiveProvider, SyntheticTradeoff};
pub use pareto::{hypervolume, hvi, ObjectivePoint, ParetoArchive, ReferencePoint};
pub use selection::{select, SelectionResult, TestRecord};
pub use stats::{alpha_max, region_of_interest, AlphaMax, RegionOfInterest};
pub use surrogate::{fit_gp, FitConfig, GpModel, KernelParams};
pub use types::{
    Bound, ConfigId, Configuration, EvalRecord, IdGenerator, LossSamples, RiskSpec, SearchSpace,
    Split,
};
